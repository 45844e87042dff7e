"""Task sets over synthetic scenes, and the prompt-selection bandit used for toy GRPO."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .env import EnvConfig, Task, reset, step_raw
from .errors import ConfigError
from .grpo import BanditSpec
from .policies import answer_block
from .reward import RewardWeights, score_trajectory
from .toyseg import generate_scene, interior_points, load_scene


def pick_target(n_regions: int, seed: int, index: int) -> int:
    rng = np.random.default_rng([seed, index, 7919])
    return int(rng.integers(1, n_regions + 1))


def make_tasks(n: int, k: int = 3, size: tuple[int, int] = (64, 64), seed: int = 0) -> list[Task]:
    """``n`` in-memory tasks; scene ``i`` uses seed ``seed * 100003 + i``."""
    w, h = size
    tasks = []
    for i in range(n):
        scene = generate_scene(k, w, h, seed * 100003 + i)
        target = pick_target(scene.n_regions, seed, i)
        tasks.append(Task(scene, target, question=f"q{i:05d}", task_id=f"task_{i:05d}"))
    return tasks


def load_tasks(scene_dir: str | Path) -> list[Task]:
    """Tasks listed in a scene directory's ``manifest.json``."""
    scene_dir = Path(scene_dir)
    try:
        manifest = json.loads((scene_dir / "manifest.json").read_text())
        tasks = []
        for entry in manifest["tasks"]:
            path = scene_dir / entry["scene"]
            scene = load_scene(path)
            tasks.append(Task(scene, int(entry["target"]), question=entry.get("question", ""),
                              task_id=entry["id"], scene_path=str(path)))
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load tasks from {scene_dir}: {exc}") from exc
    return tasks


def task_from_log_meta(meta: dict, scene_dir: str | Path | None = None) -> Task:
    path = Path(meta["scene"])
    if scene_dir is not None:
        path = Path(scene_dir) / path.name
    return Task(load_scene(path), int(meta["target"]), question=meta.get("question", ""),
                task_id=meta.get("id", ""), scene_path=str(path))


def prompt_selection_bandit(
    n_tasks: int = 4,
    seed: int = 0,
    weights: RewardWeights = RewardWeights(),
    env_config: EnvConfig = EnvConfig(),
    size: tuple[int, int] = (64, 64),
) -> BanditSpec:
    """Three-armed bandit over single-turn answers.

    Each context is a three-region scene; arm ``a`` answers with the most
    interior pixel of region ``a + 1``, so exactly one arm hits the target.
    Arm returns are full episode returns from the reward engine.
    """
    tasks = make_tasks(n_tasks, k=3, size=size, seed=seed)
    returns = np.zeros((n_tasks, 3))
    for c, task in enumerate(tasks):
        for a in range(3):
            x, y = interior_points(task.scene, a + 1, 1)[0]
            state, _ = reset(task, env_config)
            step_raw(state, answer_block([{"points": [[x, y, 1]]}]))
            returns[c, a] = score_trajectory(state, weights).S
    return BanditSpec(returns, ("region-1", "region-2", "region-3"))
