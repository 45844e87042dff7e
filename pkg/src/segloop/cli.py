"""``segloop`` command line.

Exit codes: 0 success, 2 validation error, 3 protocol error.
"""

from __future__ import annotations

import json
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import click
import numpy as np

from .bridge import EXTERNAL_PREFIX, ExternalPolicy, WireConnection, open_binding
from .config import HarnessConfig, load_config, with_overrides
from .env import EnvConfig, EpisodeState, Task, run_episode, trajectory_log_lines
from .errors import ConfigError, ProtocolError, SegloopError
from .grpo import train_toy
from .pipeline import curate, write_sft
from .policies import make_policy, parse_policy_spec
from .reports import log_task, metric_report, prediction_union, read_log, replay_log, score_log
from .reward import score_trajectory
from .tasks import load_tasks, make_tasks, prompt_selection_bandit
from .toyseg import save_scene, validate_scene

EXIT_VALIDATION = 2
EXIT_PROTOCOL = 3


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _config(ctx: click.Context, **flags: Any) -> HarnessConfig:
    cfg = load_config(ctx.obj.get("config"))
    return with_overrides(cfg, seed=ctx.obj.get("seed"), jobs=ctx.obj.get("jobs"), **flags)


def _out(ctx: click.Context, default: str) -> Path:
    return Path(ctx.obj.get("out") or default)


def _parallel_map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --- episode running -------------------------------------------------------------------


class PolicyBinding:
    """A scripted policy name or an external endpoint; one connection per worker thread."""

    def __init__(self, spec: str, seed: int, env_config: EnvConfig):
        self.spec = spec
        self.seed = seed
        self.env_config = env_config
        self.external = spec.startswith(EXTERNAL_PREFIX)
        self._local = threading.local()
        self._conns: list[WireConnection] = []
        self._lock = threading.Lock()
        if self.external:
            self._connection()  # fail fast if the endpoint is unreachable
        else:
            parse_policy_spec(spec)

    def _connection(self) -> WireConnection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = open_binding(self.spec)
            self._local.conn = conn
            with self._lock:
                self._conns.append(conn)
        return conn

    def policy_for(self, task: Task):
        if self.external:
            return ExternalPolicy(self._connection())
        return make_policy(self.spec, task, self.seed, self.env_config)

    def close(self) -> None:
        for conn in self._conns:
            conn.close()


def run_tasks(binding: PolicyBinding, tasks: list[Task], env_config: EnvConfig, jobs: int) -> list[EpisodeState]:
    return _parallel_map(lambda t: run_episode(t, binding.policy_for(t), env_config), tasks, jobs)


# --- commands ---------------------------------------------------------------------------


class _Group(click.Group):
    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except ProtocolError as exc:
            click.echo(f"protocol error: {exc}", err=True)
            ctx.exit(EXIT_PROTOCOL)
        except (SegloopError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(EXIT_VALIDATION)


def _remember(ctx: click.Context, param: click.Parameter, value: Any) -> Any:
    if value is not None:
        ctx.ensure_object(dict)[param.name] = value
    return value


def common_options(f: Callable) -> Callable:
    """``--config --seed --jobs --out``, accepted before or after the subcommand."""
    opts = [
        click.option("--config", type=click.Path(dir_okay=False), default=None, expose_value=False,
                     callback=_remember, help="JSON config file (falls back to $SEGLOOP_CONFIG)."),
        click.option("--seed", type=int, default=None, expose_value=False, callback=_remember,
                     help="Override the config seed."),
        click.option("--jobs", type=int, default=None, expose_value=False, callback=_remember,
                     help="Worker threads for episode fan-out."),
        click.option("--out", type=click.Path(file_okay=False), default=None, expose_value=False,
                     callback=_remember, help="Output directory."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


@click.group(cls=_Group)
@common_options
@click.pass_context
def main(ctx: click.Context) -> None:
    """Interactive segmentation episodes, rewards, filtering and toy GRPO."""
    ctx.ensure_object(dict)


@main.command("gen-scenes")
@click.option("--n", "n", type=int, required=True, help="Number of scenes.")
@click.option("--k", type=int, default=None, help="Regions per scene.")
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@common_options
@click.pass_context
def gen_scenes(ctx: click.Context, n: int, k: int | None, width: int | None, height: int | None) -> None:
    """Write a deterministic scene corpus plus a task manifest."""
    cfg = _config(ctx)
    if n < 0:
        raise ConfigError("--n must be non-negative")
    k = k if k is not None else cfg.scenes.k
    w = width if width is not None else cfg.scenes.width
    h = height if height is not None else cfg.scenes.height
    out = _out(ctx, "scenes")
    out.mkdir(parents=True, exist_ok=True)
    tasks = make_tasks(n, k=k, size=(w, h), seed=cfg.seed)
    entries = []
    for i, task in enumerate(tasks):
        name = f"scene_{i:05d}.json"
        problems = validate_scene(task.scene)
        if problems:
            raise ConfigError(f"generated scene {i} is invalid: {problems}")
        save_scene(task.scene, out / name)
        entries.append({"id": task.task_id, "scene": name, "target": task.target, "question": task.question})
    manifest = {
        "seed": cfg.seed,
        "spec": {"k": k, "width": w, "height": h},
        "scenes": [e["scene"] for e in entries],
        "tasks": entries,
    }
    _write(out / "manifest.json", _dump(manifest))
    click.echo(f"wrote {n} scenes to {out}")


@main.command("run")
@click.option("--scenes", "scene_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--policy", "policy_spec", required=True,
              help="Scripted policy (oracle, noisy-oracle(p,refine), greedy-centroid, random, tool-only) "
                   "or external:cmd:<command> / external:tcp:<host>:<port>.")
@click.option("--max-turns", type=int, default=None)
@click.option("--noise-radius", type=int, default=None)
@click.option("--noise-seed", type=int, default=None)
@common_options
@click.pass_context
def run(ctx: click.Context, scene_dir: str, policy_spec: str, max_turns: int | None,
        noise_radius: int | None, noise_seed: int | None) -> None:
    """Run one episode per task; write logs, reward reports and a summary."""
    cfg = _config(ctx, max_turns=max_turns, noise_radius=noise_radius, noise_seed=noise_seed)
    out = _out(ctx, "run")
    tasks = load_tasks(scene_dir)
    binding = PolicyBinding(policy_spec, cfg.seed, cfg.env)
    try:
        states = run_tasks(binding, tasks, cfg.env, cfg.jobs)
    finally:
        binding.close()
    pairs, returns = [], []
    for state in states:
        tid = state.task.task_id
        _write(out / "logs" / f"{tid}.jsonl", "\n".join(trajectory_log_lines(state)) + "\n")
        breakdown = score_trajectory(state, cfg.reward)
        _write(out / "rewards" / f"{tid}.json", _dump({"id": tid, **breakdown.to_json(cfg.reward)}))
        pairs.append((tid, state.final.union, state.task.gt_mask))
        returns.append(breakdown.S)
    report = metric_report(pairs)
    summary = {
        "policy": policy_spec,
        "n": report["n"],
        "gIoU": report["gIoU"],
        "cIoU": report["cIoU"],
        "mean_S": float(np.mean(returns)) if returns else 0.0,
        "mean_turns": float(np.mean([s.turns for s in states])) if states else 0.0,
        "config": cfg.to_json(),
    }
    _write(out / "summary.json", _dump(summary))
    click.echo(f"gIoU={summary['gIoU']:.4f} cIoU={summary['cIoU']:.4f} n={summary['n']}")


@main.command("score")
@click.argument("logs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scenes", "scene_dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory holding the scenes named in the logs.")
@common_options
@click.pass_context
def score(ctx: click.Context, logs: tuple[str, ...], scene_dir: str | None) -> None:
    """Recompute reward breakdowns from trajectory logs and ground truth."""
    cfg = _config(ctx)
    reports = []
    for path in logs:
        log = read_log(path)
        gt = log_task(log, scene_dir).gt_mask
        reports.append({"id": log.task_id, **score_log(log, gt, cfg.reward).to_json(cfg.reward)})
    text = _dump(reports[0] if len(reports) == 1 else reports)
    if ctx.obj.get("out"):
        _write(_out(ctx, ".") / "scores.json", text)
    else:
        click.echo(text, nl=False)


def _log_paths(log_dir: str) -> list[Path]:
    paths = sorted(Path(log_dir).glob("*.jsonl"))
    if not paths:
        raise ConfigError(f"no *.jsonl logs in {log_dir}")
    return paths


@main.command("filter")
@click.option("--logs", "log_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--scenes", "scene_dir", type=click.Path(exists=True, file_okay=False), default=None)
@common_options
@click.pass_context
def filter_cmd(ctx: click.Context, log_dir: str, scene_dir: str | None) -> None:
    """Filter and rescue logged trajectories into an SFT dataset."""
    cfg = _config(ctx)
    out = _out(ctx, "sft")

    def load(path: Path) -> EpisodeState:
        log = read_log(path)
        return replay_log(log, log_task(log, scene_dir))

    states = _parallel_map(load, _log_paths(log_dir), cfg.jobs)
    result = curate(states, cfg.filter)
    out.mkdir(parents=True, exist_ok=True)
    write_sft(result.examples, out / "dataset.jsonl")
    _write(out / "manifest.json", _dump(result.manifest))
    c = result.manifest["counts"]
    click.echo(f"keep={c['keep']} rescue={c['rescue']} drop={c['drop']}")


@main.command("train-toy")
@click.option("--iterations", type=int, default=None, help="Override grpo.iterations.")
@common_options
@click.pass_context
def train_toy_cmd(ctx: click.Context, iterations: int | None) -> None:
    """Toy GRPO on the prompt-selection bandit; writes the learning curve."""
    cfg = _config(ctx)
    if iterations is not None:
        cfg = replace(cfg, grpo=replace(cfg.grpo, iterations=iterations))
    out = _out(ctx, "train")
    bandit = prompt_selection_bandit(cfg.grpo.n_tasks, cfg.seed, cfg.reward, cfg.env,
                                     (cfg.scenes.width, cfg.scenes.height))
    result = train_toy(bandit, cfg.train_config())
    lines = result.log_lines()
    _write(out / "curve.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    summary = {
        "optimal_return": bandit.optimal_return(),
        "greedy_return": bandit.greedy_return(result.policy),
        "expected_return": bandit.expected_return(result.policy),
        "iterations": cfg.grpo.iterations,
        "G": cfg.grpo.G,
        "arm_returns": bandit.returns.tolist(),
    }
    _write(out / "summary.json", _dump(summary))
    click.echo(f"greedy={summary['greedy_return']:.4f} optimal={summary['optimal_return']:.4f}")


@main.command("eval")
@click.option("--logs", "log_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--scenes", "scene_dir", type=click.Path(exists=True, file_okay=False), default=None)
@common_options
@click.pass_context
def eval_cmd(ctx: click.Context, log_dir: str, scene_dir: str | None) -> None:
    """gIoU and cIoU of logged final predictions."""
    _config(ctx)
    pairs = []
    for path in _log_paths(log_dir):
        log = read_log(path)
        gt = log_task(log, scene_dir).gt_mask
        pairs.append((log.task_id, prediction_union(log, gt), gt))
    report = metric_report(pairs)
    if ctx.obj.get("out"):
        _write(_out(ctx, ".") / "eval.json", _dump(report))
    click.echo(f"gIoU={report['gIoU']:.4f} cIoU={report['cIoU']:.4f} n={report['n']}")


if __name__ == "__main__":
    sys.exit(main())
