"""Reading trajectory logs back: rescoring, replay and dataset metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .env import EnvConfig, EpisodeState, Task, env_config_from_json
from .errors import ScoreError
from .geom import BitMask, c_iou, g_iou, iou, rle_to_mask, union_masks
from .pipeline import replay
from .reward import RewardBreakdown, RewardWeights, outcome_from_events, score_episode
from .tasks import task_from_log_meta

_REPLAY_TOL = 1e-12


@dataclass(frozen=True)
class ParsedLog:
    steps: tuple[dict, ...]
    final: dict
    task: dict
    env: dict

    @property
    def task_id(self) -> str:
        return str(self.task.get("id", ""))

    def final_masks(self) -> list[BitMask]:
        return [rle_to_mask(r) for r in self.final["masks"]]

    def raws(self) -> list[str]:
        return [s["turn"] for s in self.steps]


def parse_log(text: str, source: str = "<log>") -> ParsedLog:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ScoreError(f"{source}: empty log")
    try:
        rows = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise ScoreError(f"{source}: line is not JSON ({exc})") from exc
    *steps, last = rows
    if not isinstance(last, dict) or not isinstance(last.get("final"), dict) or not isinstance(last.get("task"), dict):
        raise ScoreError(f"{source}: last line must carry 'final' and 'task'")
    if not isinstance(last["final"].get("masks"), list):
        raise ScoreError(f"{source}: final masks missing")
    for i, s in enumerate(steps, start=1):
        if not isinstance(s, dict) or s.get("t") != i:
            raise ScoreError(f"{source}: step line {i} malformed or out of order")
        if not isinstance(s.get("turn"), str) or not isinstance(s.get("events"), list) \
                or not isinstance(s.get("candidates"), list):
            raise ScoreError(f"{source}: step {i} needs 'turn', 'events' and 'candidates'")
    return ParsedLog(tuple(steps), last["final"], last["task"], last.get("env", {}))


def read_log(path: str | Path) -> ParsedLog:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScoreError(f"cannot read log {path}: {exc}") from exc
    return parse_log(text, str(path))


def log_task(log: ParsedLog, scene_dir: str | Path | None = None) -> Task:
    try:
        return task_from_log_meta(log.task, scene_dir)
    except (KeyError, OSError, ValueError) as exc:
        raise ScoreError(f"cannot load ground truth for {log.task_id!r}: {exc}") from exc


def score_log(log: ParsedLog, gt: BitMask, w: RewardWeights = RewardWeights()) -> RewardBreakdown:
    """Recompute the reward breakdown from logged events and masks alone."""
    try:
        outcomes = [
            outcome_from_events(s["events"], [rle_to_mask(c) for c in s["candidates"]]) for s in log.steps
        ]
        masks = log.final_masks()
    except (KeyError, TypeError, ValueError) as exc:
        raise ScoreError(f"{log.task_id}: malformed events or masks ({exc})") from exc
    for m in [*masks, *(o for out in outcomes for o in out.masks)]:
        if m.shape != gt.shape:
            raise ScoreError(f"{log.task_id}: mask shape {m.shape} does not match ground truth {gt.shape}")
    return score_episode(outcomes, masks, gt, w)


def replay_log(log: ParsedLog, task: Task, env_config: EnvConfig | None = None) -> EpisodeState:
    """Re-run the logged turn stream; the result must reproduce the logged prediction."""
    cfg = env_config if env_config is not None else env_config_from_json(log.env)
    state = replay(task, log.raws(), cfg)
    logged = float(log.final.get("iou", -1.0))
    if state.turns != len(log.steps) or abs(state.final_iou() - logged) > _REPLAY_TOL:
        raise ScoreError(f"{log.task_id}: replay does not reproduce the logged episode")
    return state


def metric_report(pairs: Sequence[tuple[str, BitMask, BitMask]]) -> dict:
    """gIoU and cIoU over ``(id, prediction, ground truth)`` triples."""
    masks = [(p, g) for _, p, g in pairs]
    return {
        "n": len(pairs),
        "gIoU": g_iou(masks) if masks else 0.0,
        "cIoU": c_iou(masks) if masks else 0.0,
        "per_task": {tid: iou(p, g) for tid, p, g in pairs},
    }


def prediction_union(log: ParsedLog, gt: BitMask) -> BitMask:
    return union_masks(log.final_masks(), gt.width, gt.height)
