"""Synthetic labelled scenes, view transforms and a promptable toy segmentor.

The segmentor stands in for a frozen promptable model: point prompts select
the region under the first positive click, box prompts select the region
whose tight box overlaps the prompt best. Optional boundary noise is a
deterministic function of the prompt, so replays are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import PromptError, SceneGenError, ViewError
from .geom import BBox, BitMask, PointPrompt, box_iou, connected_components, mask_to_rle, rle_to_mask

RIGHT_ANGLES = (0, 90, 180, 270)

MIN_SCENE_SIZE = 16
MIN_REGION_FRACTION = 0.01
_PLACEMENT_TRIES = 400
_SCENE_RETRIES = 25


@dataclass(frozen=True, eq=False)
class Scene:
    width: int
    height: int
    labels: np.ndarray
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        labels = np.array(self.labels, dtype=np.int32)
        if labels.shape != (self.height, self.width):
            raise ValueError(f"labels shape {labels.shape} != {(self.height, self.width)}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def n_regions(self) -> int:
        return int(self.labels.max(initial=0))

    @property
    def region_ids(self) -> range:
        return range(1, self.n_regions + 1)

    def region_mask(self, region: int) -> BitMask:
        key = ("mask", region)
        m = self._cache.get(key)
        if m is None:
            if not 1 <= region <= self.n_regions:
                m = BitMask.empty(self.width, self.height)
            else:
                m = BitMask(self.labels == region)
            self._cache[key] = m
        return m

    def region_bbox(self, region: int) -> BBox:
        boxes = self._cache.get("boxes")
        if boxes is None:
            boxes = {}
            for r, sl in enumerate(ndimage.find_objects(self.labels), start=1):
                if sl is not None:
                    boxes[r] = BBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
            self._cache["boxes"] = boxes
        return boxes.get(region, BBox.empty())

    def full_view(self) -> "ViewState":
        return ViewState(BBox(0, 0, self.width, self.height), 0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.seed == other.seed
            and bool(np.array_equal(self.labels, other.labels))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ViewState:
    """A crop of the scene (scene coordinates) followed by a counter-clockwise rotation."""

    crop: BBox
    rotation: int = 0

    def __post_init__(self) -> None:
        if self.rotation not in RIGHT_ANGLES:
            raise ViewError(f"rotation must be one of {RIGHT_ANGLES}, got {self.rotation}")
        if self.crop.is_empty():
            raise ViewError("view crop is empty")

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) of the rendered view."""
        cw = self.crop.x1 - self.crop.x0
        ch = self.crop.y1 - self.crop.y0
        return (ch, cw) if self.rotation in (90, 270) else (cw, ch)

    def rotated(self, angle: int) -> "ViewState":
        return ViewState(self.crop, (self.rotation + angle) % 360)

    def zoomed(self, box: BBox) -> "ViewState":
        """Zoom into ``box`` given in view coordinates."""
        return ViewState(map_box_to_scene(self, box), self.rotation)


@dataclass(frozen=True)
class SegmentorConfig:
    noise_radius: int = 0
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_radius < 0:
            raise ValueError("noise_radius must be non-negative")


# --- view mapping ----------------------------------------------------------


def map_point_to_scene(view: ViewState, x: int, y: int) -> tuple[int, int]:
    vw, vh = view.size
    if not (0 <= x < vw and 0 <= y < vh):
        raise ViewError(f"point ({x}, {y}) outside {vw}x{vh} view")
    cw = view.crop.x1 - view.crop.x0
    ch = view.crop.y1 - view.crop.y0
    r = view.rotation
    if r == 0:
        cx, cy = x, y
    elif r == 90:
        cx, cy = cw - 1 - y, x
    elif r == 180:
        cx, cy = cw - 1 - x, ch - 1 - y
    else:
        cx, cy = y, ch - 1 - x
    return view.crop.x0 + cx, view.crop.y0 + cy


def map_point_to_view(view: ViewState, x: int, y: int) -> tuple[int, int]:
    c = view.crop
    if not (c.x0 <= x < c.x1 and c.y0 <= y < c.y1):
        raise ViewError(f"scene point ({x}, {y}) outside view crop {c.as_list()}")
    cx, cy = x - c.x0, y - c.y0
    cw, ch = c.x1 - c.x0, c.y1 - c.y0
    r = view.rotation
    if r == 0:
        return cx, cy
    if r == 90:
        return cy, cw - 1 - cx
    if r == 180:
        return cw - 1 - cx, ch - 1 - cy
    return ch - 1 - cy, cx


def map_box_to_scene(view: ViewState, box: BBox) -> BBox:
    if box.is_empty():
        raise ViewError("cannot map an empty box")
    ax, ay = map_point_to_scene(view, box.x0, box.y0)
    bx, by = map_point_to_scene(view, box.x1 - 1, box.y1 - 1)
    return BBox(min(ax, bx), min(ay, by), max(ax, bx) + 1, max(ay, by) + 1)


def render_view(scene: Scene, view: ViewState, grid: np.ndarray | None = None) -> np.ndarray:
    """Crop-then-rotate ``grid`` (defaults to the scene labels) into view space."""
    src = scene.labels if grid is None else grid
    c = view.crop
    return np.rot90(src[c.y0:c.y1, c.x0:c.x1], k=view.rotation // 90)


# --- scene generation ------------------------------------------------------


def _shape_mask(rng: np.random.Generator, w: int, h: int, min_area: int) -> np.ndarray | None:
    max_w, max_h = max(3, w // 2), max(3, h // 2)
    sw = int(rng.integers(3, max_w + 1))
    sh = int(rng.integers(3, max_h + 1))
    if rng.random() < 0.5:
        shape = np.ones((sh, sw), dtype=bool)
    else:
        yy, xx = np.mgrid[0:sh, 0:sw]
        ry, rx = sh / 2.0, sw / 2.0
        shape = ((yy + 0.5 - ry) / ry) ** 2 + ((xx + 0.5 - rx) / rx) ** 2 <= 1.0
    if np.count_nonzero(shape) < min_area or ndimage.label(shape)[1] != 1:
        return None
    return shape


def generate_scene(k: int, width: int, height: int, seed: int) -> Scene:
    """Pack ``k`` non-touching rectangles/ellipses into a ``width`` x ``height`` scene."""
    if k < 1:
        raise ValueError("need at least one region")
    if width < MIN_SCENE_SIZE or height < MIN_SCENE_SIZE:
        raise ValueError(f"scene must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}")
    min_area = max(1, int(np.ceil(MIN_REGION_FRACTION * width * height)))
    rng = np.random.default_rng([seed, k, width, height])
    for _ in range(_SCENE_RETRIES):
        labels = np.zeros((height, width), dtype=np.int32)
        occupied = np.zeros((height, width), dtype=bool)
        placed = 0
        for _ in range(_PLACEMENT_TRIES):
            shape = _shape_mask(rng, width, height, min_area)
            if shape is None:
                continue
            sh, sw = shape.shape
            y0 = int(rng.integers(0, height - sh + 1))
            x0 = int(rng.integers(0, width - sw + 1))
            # one pixel of clearance around every region
            ya, yb = max(0, y0 - 1), min(height, y0 + sh + 1)
            xa, xb = max(0, x0 - 1), min(width, x0 + sw + 1)
            if occupied[ya:yb, xa:xb].any():
                continue
            placed += 1
            labels[y0:y0 + sh, x0:x0 + sw][shape] = placed
            occupied[y0:y0 + sh, x0:x0 + sw] |= shape
            if placed == k:
                break
        if placed == k:
            scene = Scene(width, height, labels, seed)
            if not validate_scene(scene):
                return scene
    raise SceneGenError(f"could not place {k} regions in {width}x{height} (seed {seed})")


def validate_scene(scene: Scene) -> list[str]:
    """Return a list of invariant violations (empty when the scene is valid)."""
    problems = []
    if scene.labels.min(initial=0) < 0:
        problems.append("negative label")
    present = set(np.unique(scene.labels).tolist()) - {0}
    expected = set(scene.region_ids)
    if present != expected:
        problems.append(f"region ids {sorted(present)} are not 1..{scene.n_regions}")
    min_area = MIN_REGION_FRACTION * scene.width * scene.height
    for r in sorted(present):
        m = scene.region_mask(r)
        if len(connected_components(m, 4)) != 1:
            problems.append(f"region {r} is not 4-connected")
        if m.area < min_area:
            problems.append(f"region {r} covers less than {MIN_REGION_FRACTION:.0%} of the scene")
        halo = ndimage.binary_dilation(m.bits, structure=np.ones((3, 3), dtype=bool))
        touching = set(np.unique(scene.labels[halo]).tolist()) - {0, r}
        if touching:
            problems.append(f"region {r} touches regions {sorted(touching)}")
    return problems


def interior_points(scene: Scene, region: int, n: int = 1) -> list[tuple[int, int]]:
    """The ``n`` pixels of ``region`` farthest from its boundary, ties in raster order."""
    m = scene.region_mask(region).bits
    if not m.any():
        return []
    dist = ndimage.distance_transform_cdt(np.pad(m, 1), metric="taxicab")[1:-1, 1:-1]
    flat = dist.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))
    picks = [int(i) for i in order[:n] if flat[i] > 0]
    return [(i % scene.width, i // scene.width) for i in picks]


# --- segmentation ------------------------------------------------------------


def _prompt_digest(kind: str, payload: list) -> bytes:
    return hashlib.sha256(json.dumps([kind, payload], separators=(",", ":")).encode()).digest()


def _perturb(scene: Scene, base: BitMask, cfg: SegmentorConfig, digest: bytes) -> BitMask:
    if cfg.noise_radius == 0 or base.is_empty():
        return base
    rad = cfg.noise_radius
    box = base.bbox()
    ya, yb = max(0, box.y0 - rad), min(scene.height, box.y1 + rad)
    xa, xb = max(0, box.x0 - rad), min(scene.width, box.x1 + rad)
    window = base.bits[ya:yb, xa:xb]
    size = 2 * rad + 1
    band = ndimage.binary_dilation(window, structure=np.ones((size, size), dtype=bool)) & ~window
    seed = int.from_bytes(hashlib.sha256(cfg.noise_seed.to_bytes(8, "little", signed=True) + digest).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    idx = np.flatnonzero(band)
    flip = idx[rng.random(idx.size) < 0.5]
    out = base.bits.copy()
    sub = out[ya:yb, xa:xb]
    sub.flat[flip] = True
    return BitMask(out)


def segment_points(
    scene: Scene,
    view: ViewState,
    points: Sequence[PointPrompt],
    cfg: SegmentorConfig = SegmentorConfig(),
) -> BitMask:
    """Mask selected by point prompts given in view coordinates."""
    if not points:
        raise PromptError("no points given")
    scene_pts = []
    for p in points:
        try:
            sx, sy = map_point_to_scene(view, p.x, p.y)
        except ViewError as exc:
            raise PromptError(str(exc)) from exc
        scene_pts.append((sx, sy, p.positive))
    positives = [p for p in scene_pts if p[2]]
    if not positives:
        raise PromptError("need at least one positive point")
    x, y, _ = positives[0]
    region = int(scene.labels[y, x])
    if region == 0:
        return BitMask.empty(scene.width, scene.height)
    for nx, ny, pos in scene_pts:
        if not pos and scene.labels[ny, nx] == region:
            return BitMask.empty(scene.width, scene.height)
    digest = _prompt_digest("points", [[px, py, int(pos)] for px, py, pos in scene_pts])
    return _perturb(scene, scene.region_mask(region), cfg, digest)


def segment_box(
    scene: Scene,
    view: ViewState,
    box: BBox,
    cfg: SegmentorConfig = SegmentorConfig(),
) -> BitMask:
    """Region whose tight box best overlaps ``box`` (view coordinates)."""
    if box.is_empty():
        raise PromptError("degenerate box prompt")
    try:
        sbox = map_box_to_scene(view, box)
    except ViewError as exc:
        raise PromptError(str(exc)) from exc
    best, best_iou = 0, 0.0
    for r in scene.region_ids:
        v = box_iou(sbox, scene.region_bbox(r))
        if v > best_iou:
            best, best_iou = r, v
    if best == 0:
        return BitMask.empty(scene.width, scene.height)
    digest = _prompt_digest("box", sbox.as_list())
    return _perturb(scene, scene.region_mask(best), cfg, digest)


# --- scene files -------------------------------------------------------------


def scene_to_json(scene: Scene) -> dict:
    return {
        "w": scene.width,
        "h": scene.height,
        "seed": scene.seed,
        "labels_rle": [mask_to_rle(scene.region_mask(r)) for r in scene.region_ids],
    }


def scene_from_json(data: dict) -> Scene:
    try:
        w, h, seed = int(data["w"]), int(data["h"]), int(data["seed"])
        rles = list(data["labels_rle"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed scene file: {exc}") from exc
    labels = np.zeros((h, w), dtype=np.int32)
    for r, rle in enumerate(rles, start=1):
        m = rle_to_mask(rle)
        if m.shape != (h, w):
            raise ValueError(f"region {r} has size {m.shape}, scene is {(h, w)}")
        if m.is_empty():
            raise ValueError(f"region {r} is empty")
        if (labels[m.bits] != 0).any():
            raise ValueError(f"region {r} overlaps an earlier region")
        labels[m.bits] = r
    scene = Scene(w, h, labels, seed)
    problems = validate_scene(scene)
    if problems:
        raise ValueError("; ".join(problems))
    return scene


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_json(scene), separators=(",", ":")) + "\n")


def load_scene(path: str | Path) -> Scene:
    return scene_from_json(json.loads(Path(path).read_text()))
