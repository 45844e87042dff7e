"""Tool-using segmentation episodes over synthetic scenes.

Masks and metrics, a deterministic promptable segmentor, a turn protocol,
a budgeted episode environment, process and outcome rewards, a clipped
group-relative policy-gradient kernel, and trajectory curation for
supervised fine-tuning.
"""

from __future__ import annotations

from .env import EnvConfig, Task, reset, run_episode, step, step_raw
from .geom import BBox, BitMask, PointPrompt, c_iou, g_iou, iou
from .protocol import parse_turn, serialize_turn
from .reward import RewardWeights, score_trajectory
from .toyseg import Scene, SegmentorConfig, generate_scene

__version__ = "0.1.0"

__all__ = [
    "BBox", "BitMask", "EnvConfig", "PointPrompt", "RewardWeights", "Scene", "SegmentorConfig", "Task",
    "c_iou", "g_iou", "generate_scene", "iou", "parse_turn", "reset", "run_episode", "score_trajectory",
    "serialize_turn", "step", "step_raw",
]
