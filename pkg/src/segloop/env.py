"""Finite-horizon segmentation episodes.

An episode alternates policy turns and tool execution. Every non-answer turn
spends one unit of the turn budget; once the budget is spent the policy gets
exactly one more turn, in which only an answer is accepted.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import ConfigError, EpisodeClosedError, PromptError
from .geom import BBox, BitMask, iou, mask_to_rle, union_bbox, union_masks
from .protocol import AgentTurn, AnswerPayload, FormatVerdict, ToolCall, parse_turn, serialize_turn, validate_args
from .toyseg import (
    Scene,
    SegmentorConfig,
    ViewState,
    map_point_to_scene,
    render_view,
    segment_box,
    segment_points,
)

PALETTE_SIZE = 6
HIGHLIGHT = 255
DEFAULT_MAX_TURNS = 8


@dataclass(frozen=True)
class EnvConfig:
    max_turns: int = DEFAULT_MAX_TURNS
    pool_cap: int = 6
    thumb_size: int = 96
    segmentor: SegmentorConfig = SegmentorConfig()

    def __post_init__(self) -> None:
        if not isinstance(self.max_turns, int) or self.max_turns < 0:
            raise ConfigError(f"max_turns must be a non-negative integer, got {self.max_turns!r}")
        if not isinstance(self.pool_cap, int) or self.pool_cap < 0:
            raise ConfigError(f"pool_cap must be a non-negative integer, got {self.pool_cap!r}")
        if not isinstance(self.thumb_size, int) or self.thumb_size < 1:
            raise ConfigError(f"thumb_size must be a positive integer, got {self.thumb_size!r}")
        if not isinstance(self.segmentor, SegmentorConfig):
            raise ConfigError("segmentor must be a SegmentorConfig")


@dataclass(frozen=True)
class Task:
    scene: Scene
    target: int
    question: str = ""
    task_id: str = ""
    scene_path: str = ""

    def __post_init__(self) -> None:
        if self.target not in self.scene.region_ids:
            raise ConfigError(f"target region {self.target} not in scene (1..{self.scene.n_regions})")

    @property
    def gt_mask(self) -> BitMask:
        return self.scene.region_mask(self.target)


@dataclass(frozen=True)
class Event:
    """One entry of a turn's tool results."""

    kind: str
    call: int | None = None
    tool: str | None = None
    candidate: int | None = None
    detail: str | None = None
    points: tuple[tuple[int, int], ...] | None = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        for key in ("call", "tool", "candidate", "detail"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        if self.points is not None:
            out["points"] = [list(p) for p in self.points]
        return out


@dataclass(frozen=True)
class Candidate:
    index: int
    mask: BitMask
    tool: str
    prompt: dict
    step: int


@dataclass(frozen=True)
class FinalPrediction:
    masks: tuple[BitMask, ...]
    union: BitMask
    union_box: BBox

    @classmethod
    def from_masks(cls, masks: Iterable[BitMask], width: int, height: int) -> "FinalPrediction":
        masks = tuple(masks)
        return cls(masks, union_masks(masks, width, height), union_bbox(masks))


@dataclass(frozen=True)
class Observation:
    view: ViewState
    history_pool: tuple[tuple[int, np.ndarray], ...]
    turn_index: int
    budget_remaining: int
    context_digest: str
    question: str
    scene: Scene = field(repr=False)
    events: tuple[Event, ...] = ()

    @property
    def scene_size(self) -> tuple[int, int]:
        return self.scene.width, self.scene.height

    def view_image(self) -> np.ndarray:
        return render_view(self.scene, self.view, palette_grid(self.scene))


@dataclass
class StepRecord:
    t: int
    raw: str
    turn: AgentTurn | None
    verdict: FormatVerdict
    events: tuple[Event, ...]
    candidates: tuple[int, ...]
    prior_digest: str
    observation: "Observation | None" = field(default=None, repr=False)
    reward: float | None = None

    @property
    def is_answer(self) -> bool:
        return self.turn is not None and self.turn.is_answer


@dataclass(frozen=True)
class Terminal:
    prediction: FinalPrediction
    observation: Observation


@dataclass
class EpisodeState:
    task: Task
    config: EnvConfig
    view: ViewState
    budget: int
    turn_index: int = 0
    digest: str = ""
    candidates: list[Candidate] = field(default_factory=list)
    pool: deque = field(default_factory=deque)
    steps: list[StepRecord] = field(default_factory=list)
    final: FinalPrediction | None = None
    done: bool = False

    @property
    def turns(self) -> int:
        return len(self.steps)

    def final_iou(self) -> float:
        if self.final is None:
            return 0.0
        return iou(self.final.union, self.task.gt_mask)


# --- rendering -------------------------------------------------------------------


def palette_grid(scene: Scene) -> np.ndarray:
    grid = scene._cache.get("palette")
    if grid is None:
        lab = scene.labels
        grid = np.where(lab > 0, 1 + (lab - 1) % PALETTE_SIZE, 0).astype(np.uint8)
        grid.flags.writeable = False
        scene._cache["palette"] = grid
    return grid


def _nn_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def render_overlay(scene: Scene, mask: BitMask, thumb_size: int | tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour thumbnail of the scene palette with ``mask`` highlighted."""
    if mask.shape != (scene.height, scene.width):
        raise ValueError(f"mask {mask.shape} does not match scene {(scene.height, scene.width)}")
    tw, th = (thumb_size, thumb_size) if isinstance(thumb_size, int) else thumb_size
    rows = _nn_index(scene.height, th)[:, None]
    cols = _nn_index(scene.width, tw)[None, :]
    out = palette_grid(scene)[rows, cols].copy()
    out[mask.bits[rows, cols]] = HIGHLIGHT
    out.flags.writeable = False
    return out


# --- episode lifecycle -------------------------------------------------------------


def _observe(state: EpisodeState, events: tuple[Event, ...] = ()) -> Observation:
    return Observation(
        view=state.view,
        history_pool=tuple(state.pool),
        turn_index=state.turn_index,
        budget_remaining=state.budget,
        context_digest=state.digest,
        question=state.task.question,
        scene=state.task.scene,
        events=events,
    )


def reset(task: Task, config: EnvConfig | None = None) -> tuple[EpisodeState, Observation]:
    config = EnvConfig() if config is None else config
    if not isinstance(config, EnvConfig):
        raise ConfigError("config must be an EnvConfig")
    seed_text = f"{task.task_id}|{task.question}".encode()
    state = EpisodeState(
        task=task,
        config=config,
        view=task.scene.full_view(),
        budget=config.max_turns,
        digest=hashlib.sha256(seed_text).hexdigest(),
    )
    return state, _observe(state)


def _run_call(state: EpisodeState, i: int, call: ToolCall, t: int, new: list[int]) -> Event:
    scene = state.task.scene
    problem = validate_args(call, (scene.width, scene.height), state.view)
    if problem is not None:
        return Event("invalid", call=i, tool=call.name, detail=problem)
    cfg = state.config.segmentor
    try:
        if call.name == "zoom_in":
            state.view = state.view.zoomed(call.crop)
            return Event("view", call=i, tool=call.name)
        if call.name == "rotate":
            state.view = state.view.rotated(call.angle % 360)
            return Event("view", call=i, tool=call.name)
        if call.name == "segment_points":
            mask = segment_points(scene, state.view, call.points, cfg)
            scene_pts = [(*map_point_to_scene(state.view, p.x, p.y), int(p.positive)) for p in call.points]
            prompt = {"points": [list(p) for p in scene_pts]}
            positives = tuple((x, y) for x, y, pos in scene_pts if pos)
        else:
            mask = segment_box(scene, state.view, call.box, cfg)
            b = call.box
            corners = [map_point_to_scene(state.view, b.x0, b.y0), map_point_to_scene(state.view, b.x1 - 1, b.y1 - 1)]
            xs, ys = [c[0] for c in corners], [c[1] for c in corners]
            prompt = {"box": [min(xs), min(ys), max(xs) + 1, max(ys) + 1]}
            positives = None
    except PromptError as exc:
        return Event("invalid", call=i, tool=call.name, detail=str(exc))
    k = len(state.candidates)
    state.candidates.append(Candidate(k, mask, call.name, prompt, t))
    if state.config.pool_cap > 0:
        state.pool.append((k, render_overlay(scene, mask, state.config.thumb_size)))
        while len(state.pool) > state.config.pool_cap:
            state.pool.popleft()
    new.append(k)
    return Event("segment", call=i, tool=call.name, candidate=k, points=positives)


def finalize(state: EpisodeState, answer: AnswerPayload) -> tuple[FinalPrediction, list[Event]]:
    """Segment every answer item on the full scene and collect the prediction."""
    scene = state.task.scene
    full = scene.full_view()
    cfg = state.config.segmentor
    masks, events = [], []
    for i, item in enumerate(answer.items):
        try:
            if item.points is not None:
                m = segment_points(scene, full, item.points, cfg)
            else:
                m = segment_box(scene, full, item.box, cfg)
        except PromptError as exc:
            m = BitMask.empty(scene.width, scene.height)
            events.append(Event("item_error", call=i, detail=str(exc)))
        masks.append(m)
    return FinalPrediction.from_masks(masks, scene.width, scene.height), events


def _empty_prediction(scene: Scene) -> FinalPrediction:
    return FinalPrediction.from_masks((), scene.width, scene.height)


def step(
    state: EpisodeState,
    turn: AgentTurn | None,
    raw: str | None = None,
    verdict: FormatVerdict | None = None,
) -> tuple[Observation | Terminal, tuple[Event, ...]]:
    """Apply one policy turn.

    ``turn`` is None for output that failed to parse; ``verdict`` then carries
    the violation. ``raw`` is the text logged for the turn and defaults to the
    canonical serialization of ``turn``.
    """
    if state.done:
        raise EpisodeClosedError("episode already terminated")
    if turn is None and (verdict is None or verdict.ok):
        raise ValueError("an unparsed turn needs a violation verdict")
    if raw is None:
        raw = serialize_turn(turn) if turn is not None else ""
    verdict = verdict if verdict is not None else FormatVerdict()
    t = state.turn_index + 1
    forced = state.budget == 0
    events: list[Event] = []
    new: list[int] = []
    scene = state.task.scene

    if turn is None:
        events.append(Event("format", detail=verdict.violation_kind))
        if forced:
            events.append(Event("terminated", detail="no answer after budget exhausted"))
            state.final = _empty_prediction(scene)
    elif turn.is_answer:
        state.final, item_events = finalize(state, turn.answer)
        events.extend(item_events)
        events.append(Event("answer"))
    elif forced:
        for i, call in enumerate(turn.tool_calls):
            events.append(Event("budget_exhausted", call=i, tool=call.name))
        events.append(Event("terminated", detail="no answer after budget exhausted"))
        state.final = _empty_prediction(scene)
    else:
        for i, call in enumerate(turn.tool_calls):
            events.append(_run_call(state, i, call, t, new))

    if state.final is None:
        state.budget -= 1
    prior = state.digest
    state.digest = hashlib.sha256((prior + "\x1e" + raw).encode()).hexdigest()
    state.turn_index = t
    events_t = tuple(events)
    obs = _observe(state, events_t)
    state.steps.append(StepRecord(t, raw, turn, verdict, events_t, tuple(new), prior, obs))
    if state.final is not None:
        state.done = True
        return Terminal(state.final, obs), events_t
    return obs, events_t


def step_raw(state: EpisodeState, raw: str) -> tuple[Observation | Terminal, tuple[Event, ...]]:
    turn, verdict = parse_turn(raw)
    return step(state, turn, raw=str(raw), verdict=verdict)


def run_episode(task: Task, policy, config: EnvConfig | None = None) -> EpisodeState:
    """Drive ``policy`` (anything with ``act(obs) -> str``) until the episode ends."""
    state, obs = reset(task, config)
    while not state.done:
        result, _ = step_raw(state, policy.act(obs))
        obs = result.observation if isinstance(result, Terminal) else result
    return state


# --- trajectory logs ---------------------------------------------------------------


def env_config_to_json(cfg: EnvConfig) -> dict:
    return {
        "max_turns": cfg.max_turns,
        "pool_cap": cfg.pool_cap,
        "thumb_size": cfg.thumb_size,
        "noise_radius": cfg.segmentor.noise_radius,
        "noise_seed": cfg.segmentor.noise_seed,
    }


def env_config_from_json(data: dict) -> EnvConfig:
    seg = SegmentorConfig(int(data.get("noise_radius", 0)), int(data.get("noise_seed", 0)))
    return EnvConfig(int(data.get("max_turns", DEFAULT_MAX_TURNS)), int(data.get("pool_cap", 6)),
                     int(data.get("thumb_size", 96)), seg)


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def trajectory_log_lines(state: EpisodeState) -> list[str]:
    """JSON lines: one per step, then the final prediction with task metadata."""
    lines = []
    by_index = {c.index: c for c in state.candidates}
    for rec in state.steps:
        lines.append(_dumps({
            "t": rec.t,
            "turn": rec.raw,
            "events": [e.to_json() for e in rec.events],
            "candidates": [mask_to_rle(by_index[k].mask) for k in rec.candidates],
        }))
    final = state.final if state.final is not None else _empty_prediction(state.task.scene)
    task = state.task
    lines.append(_dumps({
        "final": {
            "masks": [mask_to_rle(m) for m in final.masks],
            "iou": iou(final.union, task.gt_mask),
        },
        "task": {"id": task.task_id, "scene": task.scene_path, "target": task.target, "question": task.question},
        "env": env_config_to_json(state.config),
    }))
    return lines


def write_trajectory_log(state: EpisodeState, path: str | Path) -> None:
    Path(path).write_text("\n".join(trajectory_log_lines(state)) + "\n", encoding="utf-8")
