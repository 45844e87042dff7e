"""Scripted policies.

Every policy exposes ``act(obs) -> str`` and returns raw turn text. Privileged
teachers (``oracle``, ``noisy-oracle``) read the task's ground truth and stand
in for a strong trajectory-synthesis model; ``greedy-centroid`` and
``tool-only`` look only at the observation, so they behave identically when
driven in-process or over the external wire protocol.

Answer prompts are always given in scene coordinates.
"""

from __future__ import annotations

import hashlib
import json
import re

import numpy as np
from scipy import ndimage

from .env import EnvConfig, Task
from .geom import PointPrompt, iou
from .toyseg import SegmentorConfig, interior_points, map_point_to_scene, segment_points

POLICY_NAMES = ("oracle", "greedy-centroid", "noisy-oracle", "random", "tool-only")


def tool_block(name: str, key: str, value) -> str:
    return "<tool_call>" + json.dumps({"name": name, "args": {key: value}}, separators=(",", ":")) + "</tool_call>"


def answer_block(items: list[dict], note: str | None = None) -> str:
    body: dict = {"items": items}
    if note is not None:
        body["note"] = note
    return "<answer>" + json.dumps(body, separators=(",", ":")) + "</answer>"


def _rng_for(seed: int, task: Task | None) -> np.random.Generator:
    key = f"{seed}|{task.task_id if task is not None else ''}".encode()
    return np.random.default_rng(int.from_bytes(hashlib.sha256(key).digest()[:8], "little"))


class OraclePolicy:
    """Click the target's most interior pixel, then answer with the same click."""

    def __init__(self, task: Task):
        x, y = interior_points(task.scene, task.target, 1)[0]
        self.point = [x, y, 1]

    def act(self, obs) -> str:
        if obs.turn_index == 0 and obs.budget_remaining > 0:
            return "<think>segment the target</think>" + tool_block("segment_points", "points", [self.point])
        return "<think>the candidate covers the target</think>" + answer_block([{"points": [self.point]}])


class NoisyOraclePolicy:
    """Oracle teacher that makes mistakes and may refine.

    Makes ``1 + refine`` segmentation turns, each on a different interior
    pixel. Each click lands on a distractor region with probability ``p``.
    The answer re-issues the click whose mask best matches the ground truth,
    except that with probability ``p`` it commits to the last wrong click.
    With probability ``p / 3`` the teacher also stalls with rotations until
    the budget runs out.
    """

    def __init__(self, task: Task, p: float = 0.3, refine: int = 1, seed: int = 0,
                 segmentor: SegmentorConfig = SegmentorConfig()):
        if not 0 <= p <= 1 or refine < 0:
            raise ValueError("need 0 <= p <= 1 and refine >= 0")
        self.task = task
        self.segmentor = segmentor
        rng = _rng_for(seed, task)
        scene = task.scene
        others = [r for r in scene.region_ids if r != task.target]
        n = 1 + refine
        target_pts = interior_points(scene, task.target, n)
        self.plan: list[tuple[int, list[int]]] = []
        for j in range(n):
            if others and rng.random() < p:
                r = others[int(rng.integers(len(others)))]
                x, y = interior_points(scene, r, 1)[0]
            else:
                r = task.target
                x, y = target_pts[j % len(target_pts)]
            self.plan.append((r, [x, y, 1]))
        self.mislead = bool(rng.random() < p)
        self.stall = bool(rng.random() < p / 3)
        self.issued: list[list[int]] = []

    def act(self, obs) -> str:
        k = obs.turn_index
        if obs.budget_remaining > 0:
            if k < len(self.plan):
                pt = self.plan[k][1]
                self.issued.append(pt)
                return f"<think>probe guess {k + 1}</think>" + tool_block("segment_points", "points", [pt])
            if self.stall:
                return "<think>inspect from another angle</think>" + tool_block("rotate", "angle", 90)
        return self._answer()

    def _answer(self) -> str:
        scene, gt = self.task.scene, self.task.gt_mask
        if not self.issued:
            x, y = interior_points(scene, self.task.target, 1)[0]
            return answer_block([{"points": [[x, y, 1]]}])
        wrong = [pt for pt in self.issued if scene.labels[pt[1], pt[0]] != self.task.target]
        if self.mislead and wrong:
            return "<think>commit to the latest guess</think>" + answer_block([{"points": [wrong[-1]]}])
        full = scene.full_view()
        scores = [
            iou(segment_points(scene, full, [PointPrompt(pt[0], pt[1], True)], self.segmentor), gt)
            for pt in self.issued
        ]
        best = self.issued[int(np.argmax(scores))]
        return "<think>keep the best candidate</think>" + answer_block([{"points": [best]}])


def _largest_blob_point(image: np.ndarray) -> tuple[int, int] | None:
    """Pixel of the largest same-colour blob that lies closest to the blob centroid."""
    best, best_area = None, 0
    for level in np.unique(image):
        if level == 0:
            continue
        labels, n = ndimage.label(image == level)
        if n == 0:
            continue
        areas = np.bincount(labels.ravel())[1:]
        i = int(np.argmax(areas)) + 1
        if areas[i - 1] > best_area:
            best, best_area = labels == i, int(areas[i - 1])
    if best is None:
        return None
    ys, xs = np.nonzero(best)
    cy, cx = ys.mean(), xs.mean()
    j = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
    return int(xs[j]), int(ys[j])


class GreedyCentroidPolicy:
    """Segment the largest visible blob, then answer with it. Uses only the observation."""

    def __init__(self):
        self.point: list[int] | None = None

    def act(self, obs) -> str:
        if self.point is None:
            p = _largest_blob_point(obs.view_image())
            vw, vh = obs.view.size
            vx, vy = p if p is not None else (vw // 2, vh // 2)
            sx, sy = map_point_to_scene(obs.view, vx, vy)
            self.point = [sx, sy, 1]
            if obs.budget_remaining > 0:
                return "<think>largest blob</think>" + tool_block("segment_points", "points", [[vx, vy, 1]])
        return "<think>answer with the largest blob</think>" + answer_block([{"points": [self.point]}])


class ToolOnlyPolicy:
    """Never answers; keeps clicking the view centre."""

    def act(self, obs) -> str:
        vw, vh = obs.view.size
        return tool_block("segment_points", "points", [[vw // 2, vh // 2, 1]])


class RandomPolicy:
    """Uniformly random tool use, occasional garbage, rare answers."""

    def __init__(self, task: Task | None = None, seed: int = 0):
        self.rng = _rng_for(seed, task)

    def _point(self, w: int, h: int) -> list[int]:
        return [int(self.rng.integers(w)), int(self.rng.integers(h)), 1]

    def _box(self, w: int, h: int) -> list[int]:
        x0, x1 = sorted(int(v) for v in self.rng.integers(0, w + 1, 2))
        y0, y1 = sorted(int(v) for v in self.rng.integers(0, h + 1, 2))
        return [x0, y0, x1, y1]

    def act(self, obs) -> str:
        rng = self.rng
        sw, sh = obs.scene_size
        if obs.budget_remaining == 0 or rng.random() < 0.15:
            return answer_block([{"points": [self._point(sw, sh)]}])
        vw, vh = obs.view.size
        u = rng.random()
        if u < 0.08:
            return "<tool_call>{\"name\":\"segment_points\""
        if u < 0.3:
            return tool_block("zoom_in", "crop", self._box(vw, vh))
        if u < 0.45:
            return tool_block("rotate", "angle", int(rng.choice([90, 180, 270, 45])))
        if u < 0.8:
            return tool_block("segment_points", "points", [self._point(vw, vh)])
        return tool_block("segment_box", "box", self._box(vw, vh))


_SPEC_RE = re.compile(r"^([a-z-]+)(?:\((.*)\))?$")


def parse_policy_spec(spec: str) -> tuple[str, dict]:
    """``"noisy-oracle(0.3)"`` or ``"noisy-oracle(p=0.3,refine=2)"`` -> name and keyword args."""
    m = _SPEC_RE.match(spec.strip())
    if m is None or m.group(1) not in POLICY_NAMES:
        raise ValueError(f"unknown policy {spec!r}; choose from {POLICY_NAMES}")
    name, argstr = m.group(1), m.group(2)
    kwargs: dict = {}
    if argstr:
        for i, part in enumerate(a.strip() for a in argstr.split(",") if a.strip()):
            key, _, val = part.rpartition("=")
            if not key:
                if name != "noisy-oracle" or i > 0:
                    raise ValueError(f"positional argument {part!r} not understood for {name}")
                key = "p"
            kwargs[key] = float(val) if key == "p" else int(val)
    if name != "noisy-oracle" and kwargs:
        raise ValueError(f"policy {name} takes no arguments")
    if set(kwargs) - {"p", "refine"}:
        raise ValueError(f"unknown noisy-oracle arguments {sorted(set(kwargs) - {'p', 'refine'})}")
    return name, kwargs


def make_policy(spec: str, task: Task, seed: int = 0, env_config: EnvConfig | None = None):
    name, kwargs = parse_policy_spec(spec)
    segmentor = (env_config or EnvConfig()).segmentor
    if name == "oracle":
        return OraclePolicy(task)
    if name == "noisy-oracle":
        return NoisyOraclePolicy(task, seed=seed, segmentor=segmentor, **kwargs)
    if name == "greedy-centroid":
        return GreedyCentroidPolicy()
    if name == "tool-only":
        return ToolOnlyPolicy()
    return RandomPolicy(task, seed)
