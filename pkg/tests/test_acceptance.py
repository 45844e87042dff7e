"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import time

import numpy as np
import pytest
from click.testing import CliRunner

import golden
from grpo_cases import random_config, relative_error
from oracles import (
    advantages_ref,
    assignment_optimum,
    box_iou_exact,
    ciou_exact,
    filter_rule,
    giou_exact,
    iou_exact,
    random_filter_case,
    tight_box,
)
from segloop.cli import main as cli_main
from segloop.env import EnvConfig, Task, reset, run_episode, step_raw
from segloop.geom import BitMask, box_iou, c_iou, g_iou, iou
from segloop.grpo import TrainConfig, finite_difference_gradient, group_advantages, loss_and_gradient, train_toy
from segloop.pipeline import decide, filter_trajectory, intermediate_ious, replay, rescue
from segloop.policies import NoisyOraclePolicy, OraclePolicy, ToolOnlyPolicy, answer_block, tool_block
from segloop.protocol import parse_turn, serialize_turn
from segloop.reward import RewardWeights, hungarian, score_episode
from segloop.tasks import make_tasks, prompt_selection_bandit
from segloop.toyseg import SegmentorConfig, generate_scene, interior_points

from test_protocol import CORPUS


@pytest.fixture
def report(capsys):
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{number:2d}] {name}: {detail}")
        assert ok, detail

    return emit


def random_mask(rng: np.random.Generator, h: int, w: int) -> BitMask:
    density = rng.choice([0.0, 0.1, 0.5, 0.9, 1.0])
    return BitMask(rng.random((h, w)) < density)


def test_01_mask_metric_oracle(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    pairs, mismatches = [], 0
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 17, size=2))
        a, b = random_mask(rng, h, w), random_mask(rng, h, w)
        ab, bb = a.bits.tolist(), b.bits.tolist()
        pairs.append((a, b))
        mismatches += iou(a, b) != float(iou_exact(ab, bb))
        mismatches += box_iou(a.bbox(), b.bbox()) != float(box_iou_exact(tight_box(ab), tight_box(bb)))
    raw_pairs = [(p.bits.tolist(), g.bits.tolist()) for p, g in pairs]
    g_err = abs(g_iou(pairs) - float(giou_exact(raw_pairs)))
    c_err = abs(c_iou(pairs) - float(ciou_exact(raw_pairs)))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and g_err <= 1e-12 and c_err <= 1e-12 and elapsed < 5
    report(1, "mask-metric oracle", ok,
           f"1000 pairs, {mismatches} exact mismatches, gIoU err {g_err:.1e}, cIoU err {c_err:.1e}, {elapsed:.2f}s")


def test_02_hungarian(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    wrong = 0
    for _ in range(200):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
        cost = rng.integers(-50, 50, size=shape)
        pairs = hungarian(cost)
        valid = len(pairs) == min(shape) and len({i for i, _ in pairs}) == len({j for _, j in pairs}) == min(shape)
        wrong += not valid or sum(int(cost[i, j]) for i, j in pairs) != assignment_optimum(cost.tolist())
    elapsed = time.perf_counter() - t0
    report(2, "hungarian", wrong == 0 and elapsed < 5, f"200 matrices, {wrong} wrong, {elapsed:.2f}s")


def test_03_reward_golden(report):
    runs = [score_episode(golden.OUTCOMES, golden.FINAL_MASKS, golden.GT, RewardWeights()) for _ in range(10)]
    b = runs[0]
    exp = golden.EXPECTED
    errs = [abs(x - y) for x, y in zip(b.r_steps, exp["r_steps"])]
    errs += [abs(getattr(b, k) - exp[k]) for k in ("R_process", "R_format", "R_final", "S")]
    identical = len({(r.r_steps, r.R_process, r.R_format, r.R_final, r.S) for r in runs}) == 1
    ok = len(b.r_steps) == 3 and max(errs) <= 1e-9 and identical
    report(3, "reward golden vectors", ok, f"S={b.S!r}, max err {max(errs):.1e}, bit-identical={identical}")


def test_04_advantage_invariants(report):
    rng = np.random.default_rng(404)
    worst_mean, worst_std, bad = 0.0, 0.0, 0
    for _ in range(500):
        G = int(rng.choice([2, 4, 8]))
        S = rng.normal(0, rng.choice([1e-3, 1.0, 100.0]), size=G)
        if np.all(S == S[0]):
            continue
        A = group_advantages(S)
        std = float(A.std())
        worst_mean = max(worst_mean, abs(float(A.mean())))
        bad += not 0 <= std <= 1
        if S.var() > 1e4 * 1e-8:
            worst_std = max(worst_std, abs(1 - std))
        bad += not np.allclose(A, advantages_ref(S.tolist(), 1e-8), atol=1e-9)
    degenerate = all(not group_advantages([c] * g).any() for c in (0.0, 1.5, -7.0) for g in (2, 4, 8))
    ok = worst_mean <= 1e-12 and bad == 0 and worst_std <= 1e-3 and degenerate
    report(4, "advantage invariants", ok,
           f"max |mean| {worst_mean:.1e}, max |1-std| at Var>>delta {worst_std:.1e}, degenerate zero={degenerate}")


def test_05_gradient_check(report):
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    while n < 100:
        cfg = random_config(rng)
        if cfg is None:
            continue
        policy, groups = cfg
        _, grad = loss_and_gradient(policy, groups)
        fd = finite_difference_gradient(policy, groups, h=1e-5)
        worst = max(worst, relative_error(grad, fd))
        n += 1
    elapsed = time.perf_counter() - t0
    report(5, "gradient check", worst <= 1e-4 and elapsed < 30,
           f"100 configs, max relative error {worst:.1e}, {elapsed:.2f}s")


def test_06_toy_grpo_learning(report):
    t0 = time.perf_counter()
    bandit = prompt_selection_bandit()
    target = 0.95 * bandit.optimal_return()
    reached = []
    for seed in range(10):
        result = train_toy(bandit, TrainConfig(G=4, iterations=2000, seed=seed))
        reached.append(bandit.greedy_return(result.policy) >= target)
    elapsed = time.perf_counter() - t0
    ok = sum(reached) >= 9 and elapsed < 60
    report(6, "toy GRPO learning", ok,
           f"{sum(reached)}/10 seeds reach 0.95 x optimal ({bandit.optimal_return():.4f}), {elapsed:.2f}s")


def test_07_environment_sanity(report):
    tasks = make_tasks(100, seed=7)
    states = [run_episode(t, OraclePolicy(t)) for t in tasks]
    pairs = [(s.final.union, s.task.gt_mask) for s in states]
    gi, ci = g_iou(pairs), c_iou(pairs)

    noisy = EnvConfig(segmentor=SegmentorConfig(noise_radius=1))

    def mean_iou(refine: int) -> float:
        return float(np.mean([
            run_episode(t, NoisyOraclePolicy(t, p=0.0, refine=refine, seed=3, segmentor=noisy.segmentor), noisy)
            .final_iou() for t in tasks
        ]))

    multi, single = mean_iou(2), mean_iou(0)
    ok = gi >= 0.99 and ci >= 0.99 and multi > single
    report(7, "environment sanity", ok,
           f"oracle gIoU {gi:.4f} cIoU {ci:.4f}; noisy refine=2 {multi:.4f} > refine=0 {single:.4f}")


def test_08_budget_enforcement(report):
    tasks = make_tasks(20, seed=8)
    bad = 0
    for max_turns in (0, 3, 8):
        cfg = EnvConfig(max_turns=max_turns)
        for t in tasks:
            s = run_episode(t, ToolOnlyPolicy(), cfg)
            bad += s.turns != max_turns + 1 or not s.final.union.is_empty() or not s.done
    report(8, "budget enforcement", bad == 0, f"60 episodes at max_turns 0/3/8, {bad} violations")


def synthetic_trajectory(rng: np.random.Generator, scenes):
    """Random clicks on target or distractor, optional stalling, then an answer."""
    scene = scenes[int(rng.integers(len(scenes)))]
    task = Task(scene, 1, task_id="synthetic")
    radius = int(rng.choice([0, 0, 1]))
    cfg = EnvConfig(max_turns=11, segmentor=SegmentorConfig(radius, int(rng.integers(1 << 30))))
    points = {r: interior_points(scene, r, 4) for r in scene.region_ids}
    raws = []
    clicks = []
    for _ in range(int(rng.choice([0, 1, 2, 3, 5, 8, 10]))):
        kind = rng.random()
        if kind < 0.6:
            r = 1 if rng.random() < 0.5 else int(rng.choice(scene.region_ids))
            x, y = points[r][int(rng.integers(len(points[r])))]
            clicks.append([x, y, 1])
            raws.append(tool_block("segment_points", "points", [[x, y, 1]]))
        elif kind < 0.8:
            raws.append(tool_block("rotate", "angle", 90))
        else:
            raws.append("not a turn")
    if clicks and rng.random() < 0.8:
        answer = clicks[int(rng.integers(len(clicks)))]
    else:
        r = int(rng.choice(scene.region_ids))
        answer = [*points[r][0], 1]
    raws.append(answer_block([{"points": [answer]}]))
    return replay(task, raws, cfg)


def test_09_filter_rule_oracle(report):
    rng = np.random.default_rng(909)
    disagree = 0
    for _ in range(1000):
        final, turns, inter = random_filter_case(rng)
        d = decide(final, turns, inter)
        disagree += (d.verdict, d.reason, d.step) != filter_rule(final, turns, inter)

    scenes = [generate_scene(3, 48, 48, s) for s in range(8)]
    verdicts = {"keep": 0, "rescue": 0, "drop": 0}
    rescue_failures = 0
    for _ in range(1000):
        state = synthetic_trajectory(rng, scenes)
        gt = state.task.gt_mask.bits.tolist()
        exact = [(c.step, c.index, float(iou_exact(c.mask.bits.tolist(), gt))) for c in state.candidates]
        final = float(iou_exact(state.final.union.bits.tolist(), gt))
        d = filter_trajectory(state)
        disagree += (d.verdict, d.reason, d.step) != filter_rule(final, state.turns, exact)
        disagree += intermediate_ious(state) != exact
        verdicts[d.verdict] += 1
        if d.verdict == "rescue":
            rescue_failures += filter_trajectory(rescue(state, d.step, d.candidate)).verdict != "keep"
    ok = disagree == 0 and rescue_failures == 0 and min(verdicts.values()) > 0
    report(9, "filter-rule oracle", ok,
           f"2000 cases, {disagree} disagreements, verdicts {verdicts}, {rescue_failures} rescues not kept")


def test_10_protocol_conformance(report):
    wrong = sum(parse_turn(c["raw"])[1].violation_kind != c["expected"] for c in CORPUS)
    valid = [c for c in CORPUS if c["expected"] is None]
    trips = 0
    for c in valid:
        turn, _ = parse_turn(c["raw"])
        again, verdict = parse_turn(serialize_turn(turn))
        trips += verdict.ok and again == turn
    ok = len(CORPUS) == 30 and wrong == 0 and trips == len(valid)
    report(10, "protocol conformance", ok, f"{len(CORPUS)} cases, {wrong} misclassified, {trips}/{len(valid)} round-trips")


def test_11_determinism_and_throughput(report, tmp_path):
    runner = CliRunner()
    scenes = tmp_path / "scenes"
    runner.invoke(cli_main, ["gen-scenes", "--n", "10", "--seed", "11", "--out", str(scenes)], catch_exceptions=False)
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["run", "--scenes", str(scenes), "--policy", "noisy-oracle(0.3)", "--seed", "11",
                "--noise-radius", "1", "--out", str(out)]
        runner.invoke(cli_main, args, catch_exceptions=False)
        logs.append({p.name: p.read_bytes() for p in sorted((out / "logs").glob("*.jsonl"))})
    identical = len(logs[0]) == 10 and logs[0] == logs[1]

    scene = generate_scene(3, 256, 256, 11)
    task = Task(scene, 1, task_id="speed")
    x, y = interior_points(scene, 1, 1)[0]
    turns = [
        tool_block("segment_points", "points", [[x, y, 1]]),
        tool_block("zoom_in", "crop", [0, 0, 128, 128]),
        tool_block("rotate", "angle", 90),
        tool_block("segment_box", "box", [10, 10, 60, 60]),
    ]
    n, state = 0, None
    t0 = time.perf_counter()
    while n < 20000:
        if state is None or state.done:
            state, _ = reset(task)
        step_raw(state, turns[n % len(turns)])
        n += 1
    rate = n / (time.perf_counter() - t0)
    ok = identical and rate >= 5000
    report(11, "determinism and throughput", ok,
           f"replayed logs byte-identical={identical}; {rate:,.0f} steps/s on 256x256")
