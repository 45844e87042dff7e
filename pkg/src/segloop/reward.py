"""Composite episode reward: process shaping, format, and final-answer terms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GtEmptyError
from .geom import BitMask, box_iou, connected_components, iou, union_bbox
from .protocol import SEGMENT_TOOLS

INVALID_EVENT_KINDS = frozenset({"invalid", "format", "budget_exhausted", "item_error"})


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.2
    eta: float = 1.0
    lambda_delta: float = 1.0
    lambda_best: float = 0.5
    lambda_inv: float = 1.0
    lambda_cost: float = 0.05
    kappa_seg: float = 2.5
    kappa_geo: float = 1.0
    rho_pt: float = 0.05
    beta_pt: float = 0.1
    eps_pt: float = 0.01
    d_min: float = 8.0
    clip_lo: float = -0.1
    clip_hi: float = 0.5
    b_ok: float = 0.1
    p_viol: float = 0.5

    def __post_init__(self) -> None:
        for name, val in asdict(self).items():
            if not isinstance(val, (int, float)) or not math.isfinite(val):
                raise ConfigError(f"reward weight {name} must be a finite number, got {val!r}")
        if not self.clip_lo < 0 < self.clip_hi:
            raise ConfigError("need clip_lo < 0 < clip_hi")
        if self.d_min <= 0:
            raise ConfigError("d_min must be positive")

    def kappa(self, tool: str) -> float:
        return self.kappa_seg if tool in SEGMENT_TOOLS else self.kappa_geo

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "RewardWeights":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown reward weights: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ShapingState:
    iou_prev: float = 0.0
    iou_best: float = 0.0
    point_history: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class TurnOutcome:
    """What one turn did, as far as rewards are concerned."""

    masks: tuple[BitMask, ...] = ()
    calls: tuple[str, ...] = ()
    invalid: bool = False
    points: tuple[tuple[int, int], ...] = ()
    is_answer: bool = False


@dataclass(frozen=True)
class RewardBreakdown:
    r_steps: tuple[float, ...]
    R_process: float
    R_format: float
    R_final: float
    S: float
    diagnostics: dict = field(default_factory=dict, compare=False)

    def to_json(self, weights: RewardWeights) -> dict:
        return {
            "r_steps": list(self.r_steps),
            "R_process": self.R_process,
            "R_format": self.R_format,
            "R_final": self.R_final,
            "S": self.S,
            "weights": weights.to_json(),
        }


# --- process shaping ---------------------------------------------------------------


def point_novelty(
    new_points: Sequence[tuple[int, int]],
    history: Sequence[tuple[int, int]],
    delta: float,
    w: RewardWeights,
) -> float:
    """Bonus for clicks far from earlier clicks, penalty for near-repeats.

    Points are judged in order, each against the history plus the points
    already judged in the same turn. Nothing is paid unless ``delta`` exceeds
    ``eps_pt``.
    """
    if delta <= w.eps_pt:
        return 0.0
    seen = [tuple(p) for p in history]
    n_new = 0
    redund = 0.0
    for p in new_points:
        if seen:
            d = min(math.dist(p, q) for q in seen)
        else:
            d = math.inf
        if d >= w.d_min:
            n_new += 1
        else:
            redund += min(max(1.0 - d / w.d_min, 0.0), 1.0)
        seen.append(tuple(p))
    return w.rho_pt * n_new - w.beta_pt * redund


def step_reward(
    state: ShapingState,
    outcome: TurnOutcome,
    gt: BitMask,
    w: RewardWeights,
) -> tuple[float, ShapingState]:
    r, new_state, _ = step_reward_terms(state, outcome, gt, w)
    return r, new_state


def step_reward_terms(
    state: ShapingState,
    outcome: TurnOutcome,
    gt: BitMask,
    w: RewardWeights,
) -> tuple[float, ShapingState, dict]:
    """Per-turn shaping reward together with its individual terms."""
    for m in outcome.masks:
        if m.shape != gt.shape:
            raise DimensionError(f"mask {m.shape} vs ground truth {gt.shape}")
    if outcome.masks:
        iou_t = max(iou(m, gt) for m in outcome.masks)
    else:
        iou_t = state.iou_prev
    delta = iou_t - state.iou_prev
    terms = {
        "delta": w.lambda_delta * min(max(delta, w.clip_lo), w.clip_hi),
        "best": w.lambda_best * max(0.0, iou_t - state.iou_best),
        "cost": -w.lambda_cost * sum(w.kappa(c) for c in outcome.calls),
        "invalid": -w.lambda_inv if outcome.invalid else 0.0,
        "points": point_novelty(outcome.points, state.point_history, delta, w),
    }
    r = terms["delta"] + terms["best"] + terms["cost"] + terms["invalid"] + terms["points"]
    new_state = replace(
        state,
        iou_prev=iou_t,
        iou_best=max(state.iou_best, iou_t),
        point_history=state.point_history + tuple(tuple(p) for p in outcome.points),
    )
    terms["iou"] = iou_t
    return r, new_state, terms


# --- Hungarian matching --------------------------------------------------------------


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment for a rectangular cost matrix.

    Returns ``min(rows, cols)`` (row, col) pairs sorted by row. Shortest
    augmenting paths with dual potentials, O(n^2 m).
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if c.size == 0:
        return []
    if not np.isfinite(c).all():
        raise ValueError("cost entries must be finite")
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape
    # 1-based arrays; column 0 is the virtual start of each augmenting path
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta, j1 = np.inf, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(b, a) for a, b in pairs]
    return sorted(pairs)


# --- final answer ----------------------------------------------------------------------


def final_reward(
    pred_masks: Sequence[BitMask],
    gt: BitMask,
    connectivity: int = 4,
) -> tuple[float, dict]:
    """Matched mean IoU over GT components plus half the union-box IoU."""
    if gt.is_empty():
        raise GtEmptyError("ground truth mask is empty")
    for m in pred_masks:
        if m.shape != gt.shape:
            raise DimensionError(f"prediction {m.shape} vs ground truth {gt.shape}")
    comps = connected_components(gt, connectivity)
    ious = np.array([[iou(p, g) for g in comps] for p in pred_masks]).reshape(len(pred_masks), len(comps))
    pairs = hungarian(1.0 - ious) if len(pred_masks) else []
    match = float(sum(ious[i, j] for i, j in pairs)) / len(comps)
    b = box_iou(union_bbox(pred_masks), union_bbox(comps))
    diag = {
        "iou_match": match,
        "iou_box": b,
        "assignment": pairs,
        "gt_components": len(comps),
    }
    return match + 0.5 * b, diag


# --- format and total ------------------------------------------------------------------


def format_reward(verdicts: Iterable[bool], w: RewardWeights = RewardWeights()) -> float:
    """+b_ok per clean turn, -p_viol per violating turn, clamped to [-1, 1]."""
    total = 0.0
    for ok in verdicts:
        total += w.b_ok if ok else -w.p_viol
    return min(max(total, -1.0), 1.0)


def total_return(r_final: float, r_process: float, r_format: float, w: RewardWeights = RewardWeights()) -> float:
    return w.alpha * r_final + w.beta * r_process + w.gamma * r_format


def outcome_from_events(events: Sequence[dict], masks: Sequence[BitMask]) -> TurnOutcome:
    """Build a turn outcome from JSON events (as logged) and the turn's new masks."""
    calls, points = [], []
    invalid = is_answer = False
    for e in events:
        kind = e.get("kind")
        if kind in ("segment", "view"):
            calls.append(e["tool"])
            points.extend(tuple(p) for p in e.get("points") or ())
        elif kind in INVALID_EVENT_KINDS:
            invalid = True
        elif kind == "answer":
            is_answer = True
    return TurnOutcome(tuple(masks), tuple(calls), invalid, tuple(points), is_answer)


def score_episode(
    outcomes: Sequence[TurnOutcome],
    final_masks: Sequence[BitMask],
    gt: BitMask,
    w: RewardWeights = RewardWeights(),
    connectivity: int = 4,
) -> RewardBreakdown:
    """Full reward breakdown. Answer turns are excluded from process shaping."""
    state = ShapingState()
    r_steps, terms = [], []
    for out in outcomes:
        if out.is_answer:
            continue
        r, state, parts = step_reward_terms(state, out, gt, w)
        r_steps.append(r)
        terms.append(parts)
    r_process = w.eta * sum(r_steps)
    r_format = format_reward((not o.invalid for o in outcomes), w)
    r_final, diag = final_reward(final_masks, gt, connectivity)
    s = total_return(r_final, r_process, r_format, w)
    return RewardBreakdown(tuple(r_steps), r_process, r_format, r_final, s, {"final": diag, "steps": terms})


def score_trajectory(state, w: RewardWeights = RewardWeights(), connectivity: int = 4) -> RewardBreakdown:
    """Score a finished :class:`~segloop.env.EpisodeState`."""
    by_index = {c.index: c.mask for c in state.candidates}
    outcomes = [
        outcome_from_events([e.to_json() for e in rec.events], [by_index[k] for k in rec.candidates])
        for rec in state.steps
    ]
    final = state.final.masks if state.final is not None else ()
    breakdown = score_episode(outcomes, final, state.task.gt_mask, w, connectivity)
    for rec, r in zip((s for s in state.steps if not s.is_answer), breakdown.r_steps):
        rec.reward = r
    return breakdown
