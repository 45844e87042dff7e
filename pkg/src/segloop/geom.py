"""Binary mask and box geometry.

Masks are immutable ``(height, width)`` boolean grids. Boxes use an inclusive
top-left corner and an exclusive bottom-right corner, so a box covering the
single pixel ``(x, y)`` is ``BBox(x, y, x + 1, y + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionError, EmptyDatasetError

Connectivity = Literal[4, 8]

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def _readonly(arr: np.ndarray) -> np.ndarray:
    # Already-frozen boolean grids are shared, everything else is copied once.
    if arr.dtype == bool and not arr.flags.writeable and arr.flags.c_contiguous:
        return arr
    arr = np.array(arr, dtype=bool, order="C")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BitMask:
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise DimensionError(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        object.__setattr__(self, "bits", _readonly(bits))

    @classmethod
    def empty(cls, width: int, height: int) -> "BitMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def is_empty(self) -> bool:
        return not self.bits.any()

    def bbox(self) -> "BBox":
        return _tight_box(self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BitMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"BitMask({self.width}x{self.height}, area={self.area})"


@dataclass(frozen=True)
class BBox:
    x0: int
    y0: int
    x1: int
    y1: int

    @classmethod
    def empty(cls) -> "BBox":
        return cls(0, 0, 0, 0)

    def is_empty(self) -> bool:
        return self.x1 <= self.x0 or self.y1 <= self.y0

    @property
    def area(self) -> int:
        if self.is_empty():
            return 0
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    positive: bool = True


def _check_same(a: BitMask, b: BitMask) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")


def _tight_box(bits: np.ndarray) -> BBox:
    rows = np.flatnonzero(bits.any(axis=1))
    if rows.size == 0:
        return BBox.empty()
    cols = np.flatnonzero(bits.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def intersection_union(a: BitMask, b: BitMask) -> tuple[int, int]:
    _check_same(a, b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter, union


def iou(a: BitMask, b: BitMask) -> float:
    """Foreground IoU of two binary masks; two empty masks score 1.0."""
    inter, union = intersection_union(a, b)
    if union == 0:
        return 1.0
    return inter / union


def box_iou(a: BBox, b: BBox) -> float:
    """Area IoU of two boxes; like masks, two empty boxes score 1.0."""
    if a.is_empty() and b.is_empty():
        return 1.0
    if a.is_empty() or b.is_empty():
        return 0.0
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0) * max(ih, 0)
    return inter / (a.area + b.area - inter)


def connected_components(m: BitMask, connectivity: Connectivity = 4) -> list[BitMask]:
    """Split ``m`` into components, ordered by their first pixel in raster order."""
    if connectivity not in _STRUCTURE:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, n = ndimage.label(m.bits, structure=_STRUCTURE[connectivity])
    if n == 0:
        return []
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    order = [int(i) for _, i in sorted(zip(first, ids)) if i != 0]
    return [BitMask(labels == i) for i in order]


def union_masks(masks: Sequence[BitMask], width: int | None = None, height: int | None = None) -> BitMask:
    """Pixel-wise OR. ``width``/``height`` size the result when ``masks`` is empty."""
    if not masks:
        if width is None or height is None:
            raise DimensionError("union of no masks needs explicit width and height")
        return BitMask.empty(width, height)
    first = masks[0]
    if width is not None and height is not None and first.shape != (height, width):
        raise DimensionError(f"masks are {first.shape}, requested {(height, width)}")
    out = first.bits.copy()
    for m in masks[1:]:
        _check_same(first, m)
        out |= m.bits
    return BitMask(out)


def union_bbox(masks: Iterable[BitMask]) -> BBox:
    masks = list(masks)
    if not masks:
        return BBox.empty()
    for m in masks[1:]:
        _check_same(masks[0], m)
    boxes = [b for b in (m.bbox() for m in masks) if not b.is_empty()]
    if not boxes:
        return BBox.empty()
    return BBox(
        min(b.x0 for b in boxes),
        min(b.y0 for b in boxes),
        max(b.x1 for b in boxes),
        max(b.y1 for b in boxes),
    )


def g_iou(pairs: Sequence[tuple[BitMask, BitMask]]) -> float:
    """Mean of per-pair IoU."""
    if not pairs:
        raise EmptyDatasetError("gIoU of an empty dataset")
    return sum(iou(p, g) for p, g in pairs) / len(pairs)


def c_iou(pairs: Sequence[tuple[BitMask, BitMask]]) -> float:
    """Cumulative IoU: summed intersections over summed unions."""
    if not pairs:
        raise EmptyDatasetError("cIoU of an empty dataset")
    inter = union = 0
    for p, g in pairs:
        i, u = intersection_union(p, g)
        inter += i
        union += u
    if union == 0:
        return 1.0
    return inter / union


def dilate(m: BitMask, radius: int) -> BitMask:
    """Square (Chebyshev) dilation by ``radius`` pixels."""
    if radius <= 0:
        return m
    size = 2 * radius + 1
    return BitMask(ndimage.binary_dilation(m.bits, structure=np.ones((size, size), dtype=bool)))


# --- run-length encoding -------------------------------------------------


def mask_to_rle(m: BitMask) -> dict:
    """Column-major RLE, counts alternate 0-runs and 1-runs starting with zeros."""
    flat = m.bits.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [m.height, m.width], "counts": [int(c) for c in counts]}


def rle_to_mask(rle: dict) -> BitMask:
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DimensionError(f"malformed RLE: {exc}") from exc
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise DimensionError(f"RLE counts do not cover a {h}x{w} mask")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return BitMask(flat.reshape((h, w), order="F"))
