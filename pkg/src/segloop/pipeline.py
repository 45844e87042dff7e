"""Trajectory synthesis, filtering, rescue and SFT dataset emission."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .env import EnvConfig, EpisodeState, Task, reset, run_episode, step, step_raw
from .errors import RescueError
from .geom import iou
from .policies import answer_block, make_policy
from .protocol import AgentTurn, serialize_observation, serialize_turn

KEEP_IOU = 0.9
MAX_TURNS = 8


@dataclass(frozen=True)
class FilterThresholds:
    keep_iou: float = KEEP_IOU
    max_turns: int = MAX_TURNS
    rescue_iou: float = KEEP_IOU


@dataclass(frozen=True)
class FilterDecision:
    verdict: Literal["keep", "drop", "rescue"]
    final_iou: float
    best_intermediate_iou: float
    turns: int
    reason: str | None = None
    step: int | None = None
    candidate: int | None = None


def decide(
    final_iou: float,
    turns: int,
    intermediate: Sequence[tuple[int, int, float]],
    th: FilterThresholds = FilterThresholds(),
) -> FilterDecision:
    """Pure filtering rule.

    ``intermediate`` holds ``(step, candidate index, iou)`` for every candidate
    mask produced before the final answer. The earliest qualifying step is
    the rescue point.
    """
    best = max((v for _, _, v in intermediate), default=0.0)
    if final_iou >= th.keep_iou and turns <= th.max_turns:
        return FilterDecision("keep", final_iou, best, turns)
    if turns <= th.max_turns:
        hits = [(t, k) for t, k, v in intermediate if v >= th.rescue_iou]
        if hits:
            t, k = min(hits)
            return FilterDecision("rescue", final_iou, best, turns, step=t, candidate=k)
    reason = "iou" if final_iou < th.keep_iou else "turns"
    return FilterDecision("drop", final_iou, best, turns, reason=reason)


def intermediate_ious(state: EpisodeState) -> list[tuple[int, int, float]]:
    gt = state.task.gt_mask
    return [(c.step, c.index, iou(c.mask, gt)) for c in state.candidates]


def filter_trajectory(state: EpisodeState, th: FilterThresholds = FilterThresholds()) -> FilterDecision:
    return decide(state.final_iou(), state.turns, intermediate_ious(state), th)


def synthesize(
    teacher: str,
    tasks: Sequence[Task],
    env_config: EnvConfig = EnvConfig(),
    seed: int = 0,
) -> list[EpisodeState]:
    """Run ``teacher`` once on every task; deterministic for a fixed seed."""
    return [run_episode(task, make_policy(teacher, task, seed, env_config), env_config) for task in tasks]


def replay(task: Task, raws: Iterable[str], env_config: EnvConfig = EnvConfig()) -> EpisodeState:
    state, _ = reset(task, env_config)
    for raw in raws:
        step_raw(state, raw)
        if state.done:
            break
    return state


def rescue(state: EpisodeState, step_index: int, candidate: int | None = None) -> EpisodeState:
    """Cut the trajectory after ``step_index`` and answer with that step's correct prompt.

    ``candidate`` picks the prompt to re-issue; by default the step's
    candidate with the highest IoU.
    """
    if not 1 <= step_index <= state.turns:
        raise RescueError(f"step {step_index} outside 1..{state.turns}")
    rec = state.steps[step_index - 1]
    if rec.is_answer or not rec.candidates:
        raise RescueError(f"step {step_index} produced no candidate mask")
    gt = state.task.gt_mask
    if candidate is None:
        candidate = max(rec.candidates, key=lambda k: iou(state.candidates[k].mask, gt))
    elif candidate not in rec.candidates:
        raise RescueError(f"candidate {candidate} was not produced at step {step_index}")
    prompt = state.candidates[candidate].prompt
    new, _ = reset(state.task, state.config)
    for old in state.steps[:step_index]:
        step(new, old.turn, raw=old.raw, verdict=old.verdict)
    step_raw(new, "<think>the earlier candidate was correct</think>" + answer_block([prompt]))
    return new


# --- SFT emission -----------------------------------------------------------------------


@dataclass(frozen=True)
class Unit:
    kind: Literal["think", "tool", "obs", "answer"]
    text: str
    sup: int

    def to_json(self) -> dict:
        return {"kind": self.kind, "text": self.text, "sup": self.sup}


@dataclass(frozen=True)
class SftExample:
    id: str
    units: tuple[Unit, ...]
    final_iou: float
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def supervision_mask(self) -> list[int]:
        return [u.sup for u in self.units]

    def to_json(self) -> dict:
        return {"id": self.id, "units": [u.to_json() for u in self.units], "final_iou": self.final_iou}

    @classmethod
    def from_json(cls, data: dict) -> "SftExample":
        units = tuple(Unit(u["kind"], u["text"], int(u["sup"])) for u in data["units"])
        return cls(data["id"], units, float(data["final_iou"]))


def _turn_units(rec) -> list[Unit]:
    turn = rec.turn
    if turn is None:
        # malformed output stays in context but is never a training target
        return [Unit("tool", rec.raw, 0)]
    units = []
    if turn.think is not None:
        units.append(Unit("think", f"<think>{turn.think}</think>", 1))
    if turn.answer is not None:
        units.append(Unit("answer", serialize_turn(AgentTurn(answer=turn.answer)), 1))
    for call in turn.tool_calls:
        units.append(Unit("tool", serialize_turn(AgentTurn(tool_calls=(call,))), 1))
    return units


def to_sft_example(state: EpisodeState, example_id: str | None = None) -> SftExample:
    units: list[Unit] = []
    for rec in state.steps:
        units.extend(_turn_units(rec))
        if not rec.is_answer and rec.observation is not None and rec is not state.steps[-1]:
            units.append(Unit("obs", serialize_observation(rec.observation, images=False), 0))
    return SftExample(example_id or state.task.task_id, tuple(units), state.final_iou())


@dataclass
class CurationResult:
    examples: list[SftExample]
    decisions: dict[str, FilterDecision]
    manifest: dict


def curate(states: Sequence[EpisodeState], th: FilterThresholds = FilterThresholds()) -> CurationResult:
    """Filter, rescue where possible, and emit SFT examples for kept trajectories."""
    examples, decisions = [], {}
    counts: Counter = Counter()
    reasons: Counter = Counter()
    flagged = []
    for state in states:
        d = filter_trajectory(state, th)
        decisions[state.task.task_id] = d
        counts[d.verdict] += 1
        if d.verdict == "keep":
            examples.append(to_sft_example(state))
        elif d.verdict == "rescue":
            fixed = rescue(state, d.step, d.candidate)
            redo = filter_trajectory(fixed, th)
            if redo.verdict != "keep":
                raise RescueError(f"rescued trajectory {state.task.task_id} re-filtered as {redo.verdict}")
            examples.append(to_sft_example(fixed))
            flagged.append({"id": state.task.task_id, "step": d.step, "final_iou_before": d.final_iou,
                            "final_iou_after": redo.final_iou})
        else:
            reasons[d.reason] += 1
    manifest = {
        "counts": {k: counts.get(k, 0) for k in ("keep", "rescue", "drop")},
        "drop_reasons": dict(sorted(reasons.items())),
        "examples": len(examples),
        "needs_review": flagged,
        "thresholds": {"keep_iou": th.keep_iou, "max_turns": th.max_turns, "rescue_iou": th.rescue_iou},
    }
    return CurationResult(examples, decisions, manifest)


def write_sft(examples: Sequence[SftExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), separators=(",", ":"), ensure_ascii=False) + "\n")


def load_sft(path: str | Path) -> list[SftExample]:
    with open(path, encoding="utf-8") as fh:
        return [SftExample.from_json(json.loads(line)) for line in fh if line.strip()]
