"""Harness configuration: one JSON file, every key optional.

Example::

    {
      "seed": 0,
      "jobs": 4,
      "env": {"max_turns": 8, "pool_cap": 6, "thumb_size": 96},
      "segmentor": {"noise_radius": 0, "noise_seed": 0},
      "reward": {"alpha": 1.0, "beta": 0.5, "gamma": 0.2, "lambda_cost": 0.05},
      "grpo": {"G": 4, "iterations": 2000, "step_size": 0.5, "eps_clip": 0.2,
               "delta": 1e-8, "inner_steps": 2, "n_tasks": 4},
      "scenes": {"k": 3, "width": 64, "height": 64},
      "filter": {"keep_iou": 0.9, "max_turns": 8, "rescue_iou": 0.9}
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .env import EnvConfig
from .errors import ConfigError
from .grpo import TrainConfig
from .pipeline import FilterThresholds
from .reward import RewardWeights
from .toyseg import SegmentorConfig

CONFIG_ENV_VAR = "SEGLOOP_CONFIG"


@dataclass(frozen=True)
class SceneSettings:
    k: int = 3
    width: int = 64
    height: int = 64


@dataclass(frozen=True)
class GrpoSettings:
    G: int = 4
    iterations: int = 2000
    step_size: float = 0.5
    eps_clip: float = 0.2
    delta: float = 1e-8
    inner_steps: int = 2
    n_tasks: int = 4


@dataclass(frozen=True)
class HarnessConfig:
    seed: int = 0
    jobs: int = 1
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    grpo: GrpoSettings = field(default_factory=GrpoSettings)
    scenes: SceneSettings = field(default_factory=SceneSettings)
    filter: FilterThresholds = field(default_factory=FilterThresholds)

    def train_config(self) -> TrainConfig:
        g = self.grpo
        return TrainConfig(G=g.G, iterations=g.iterations, step_size=g.step_size, eps_clip=g.eps_clip,
                           delta=g.delta, inner_steps=g.inner_steps, seed=self.seed)

    def to_json(self) -> dict:
        out = {
            "seed": self.seed,
            "jobs": self.jobs,
            "env": {"max_turns": self.env.max_turns, "pool_cap": self.env.pool_cap, "thumb_size": self.env.thumb_size},
            "segmentor": asdict(self.env.segmentor),
            "reward": self.reward.to_json(),
            "grpo": asdict(self.grpo),
            "scenes": asdict(self.scenes),
            "filter": asdict(self.filter),
        }
        return out


def _build(cls, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} settings: {exc}") from exc


def config_from_dict(data: dict) -> HarnessConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"seed", "jobs", "env", "segmentor", "reward", "grpo", "scenes", "filter"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    segmentor = _build(SegmentorConfig, data.get("segmentor", {}), "segmentor")
    env = _build(EnvConfig, {**data.get("env", {}), "segmentor": segmentor}, "env")
    cfg = HarnessConfig(
        seed=data.get("seed", 0),
        jobs=data.get("jobs", 1),
        env=env,
        reward=_build(RewardWeights, data.get("reward", {}), "reward"),
        grpo=_build(GrpoSettings, data.get("grpo", {}), "grpo"),
        scenes=_build(SceneSettings, data.get("scenes", {}), "scenes"),
        filter=_build(FilterThresholds, data.get("filter", {}), "filter"),
    )
    validate(cfg)
    return cfg


def validate(cfg: HarnessConfig) -> None:
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    if not isinstance(cfg.jobs, int) or cfg.jobs < 1:
        raise ConfigError("jobs must be a positive integer")
    s = cfg.scenes
    if s.k < 1 or s.width < 16 or s.height < 16:
        raise ConfigError("scenes need k >= 1 and at least 16x16 pixels")
    f = cfg.filter
    if not (0 <= f.keep_iou <= 1 and 0 <= f.rescue_iou <= 1 and f.max_turns >= 0):
        raise ConfigError("filter thresholds out of range")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"invalid grpo settings: {exc}") from exc
    if cfg.grpo.n_tasks < 1:
        raise ConfigError("grpo.n_tasks must be positive")


def load_config(path: str | Path | None = None) -> HarnessConfig:
    """Load ``path``, else ``$SEGLOOP_CONFIG``, else all defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is None:
        return HarnessConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def with_overrides(cfg: HarnessConfig, **flags: Any) -> HarnessConfig:
    """Apply command-line overrides; ``None`` values leave the file value in place."""
    out = cfg
    if flags.get("seed") is not None:
        out = replace(out, seed=flags["seed"])
    if flags.get("jobs") is not None:
        out = replace(out, jobs=flags["jobs"])
    env_updates = {k: flags[k] for k in ("max_turns", "pool_cap", "thumb_size") if flags.get(k) is not None}
    seg_updates = {k: flags[k] for k in ("noise_radius", "noise_seed") if flags.get(k) is not None}
    try:
        if env_updates or seg_updates:
            seg = replace(out.env.segmentor, **seg_updates)
            out = replace(out, env=replace(out.env, segmentor=seg, **env_updates))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    validate(out)
    return out
