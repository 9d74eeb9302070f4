"""Normalized bounding-box algebra used for ROI prediction and memory regions.

Boxes live in normalized image coordinates: (x1, y1) is the top-left corner,
(x2, y2) the bottom-right, all in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

# slack for float products like 0.3 * 10 landing just above an integer
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def is_valid(self) -> bool:
        return 0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0

    def contains(self, other: "BBox", tol: float = 0.0) -> bool:
        return (
            self.x1 <= other.x1 + tol
            and self.y1 <= other.y1 + tol
            and self.x2 >= other.x2 - tol
            and self.y2 >= other.y2 - tol
        )

    def clamp(self) -> "BBox":
        return BBox(*(min(1.0, max(0.0, v)) for v in self.as_tuple()))


FULL_FRAME = BBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class GridRect:
    """Half-open cell range ``[row0, row1) x [col0, col1)`` on an H x W grid."""

    row0: int
    col0: int
    row1: int
    col1: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.row1 - self.row0, self.col1 - self.col0)

    @property
    def size(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row1), slice(self.col0, self.col1)

    def within(self, H: int, W: int) -> bool:
        return 0 <= self.row0 < self.row1 <= H and 0 <= self.col0 < self.col1 <= W


class NoLiveObjects(ValueError):
    """Raised when a motion-path ROI is requested with no tracked objects."""


def union(a: BBox, b: BBox) -> BBox:
    """Smallest axis-aligned box containing both ``a`` and ``b``."""
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def motion_path_roi(prev: Sequence[BBox], pred: Sequence[BBox]) -> BBox:
    """Union of every object's swept path between two frames.

    ``prev[i]`` is object i's box in the frame being memorized and ``pred[i]``
    its predicted box in the following frame.
    """
    if len(prev) != len(pred):
        raise ValueError(f"box lists differ in length: {len(prev)} vs {len(pred)}")
    if not prev:
        raise NoLiveObjects("no live objects to build a motion path from")
    roi = union(prev[0], pred[0])
    for a, b in zip(prev[1:], pred[1:]):
        roi = union(roi, union(a, b))
    return roi


def pad(b: BBox, phi: float) -> BBox:
    if phi < 0:
        raise ValueError(f"padding must be non-negative, got {phi}")
    return BBox(b.x1 - phi, b.y1 - phi, b.x2 + phi, b.y2 + phi).clamp()


def shrink(b: BBox, phi: float) -> BBox:
    """Inverse of :func:`pad` for boxes that were not clamped."""
    return BBox(b.x1 + phi, b.y1 + phi, b.x2 - phi, b.y2 - phi)


def _fit_interval(center: float, length: float) -> tuple[float, float]:
    # shift rather than clip, so the requested length survives the frame border
    lo = center - 0.5 * length
    hi = center + 0.5 * length
    if lo < 0.0:
        lo, hi = 0.0, length
    elif hi > 1.0:
        lo, hi = 1.0 - length, 1.0
    return max(0.0, lo), min(1.0, hi)


def enforce_min_ratio(b: BBox, min_ratio: float) -> BBox:
    """Grow ``b`` about its center until it covers ``min_ratio`` of the frame.

    Aspect ratio is kept unless one side would exceed the frame, in which case
    that side is capped at 1 and the other side absorbs the remaining area.
    Boxes touching the border are shifted inward so the output still contains
    the input and reaches the requested area.
    """
    if not 0.0 < min_ratio <= 1.0:
        raise ValueError(f"min_ratio must be in (0, 1], got {min_ratio}")
    if b.area >= min_ratio:
        return b
    w, h = max(0.0, b.width), max(0.0, b.height)
    # w * h can underflow to zero for subnormal sides
    if w * h > 0.0:
        scale = math.sqrt(min_ratio / (w * h))
        new_w, new_h = w * scale, h * scale
    else:
        side = math.sqrt(min_ratio)
        new_w = max(w, side)
        new_h = max(h, min_ratio / new_w)
    if new_w > 1.0:
        new_w, new_h = 1.0, min_ratio
    elif new_h > 1.0:
        new_w, new_h = min_ratio, 1.0
    new_w, new_h = min(1.0, max(new_w, w)), min(1.0, max(new_h, h))
    cx, cy = b.center
    x1, x2 = _fit_interval(cx, new_w)
    y1, y2 = _fit_interval(cy, new_h)
    return BBox(x1, y1, x2, y2)


def to_grid(b: BBox, H: int, W: int) -> GridRect:
    """Cells touched by ``b`` on an H x W grid, never smaller than 1 x 1."""
    if H < 1 or W < 1:
        raise ValueError(f"grid must be at least 1x1, got {H}x{W}")
    row0 = min(H - 1, max(0, math.floor(b.y1 * H + _GRID_EPS)))
    col0 = min(W - 1, max(0, math.floor(b.x1 * W + _GRID_EPS)))
    row1 = min(H, max(row0 + 1, math.ceil(b.y2 * H - _GRID_EPS)))
    col1 = min(W, max(col0 + 1, math.ceil(b.x2 * W - _GRID_EPS)))
    return GridRect(row0, col0, row1, col1)


def from_grid(rect: GridRect, H: int, W: int) -> BBox:
    """Normalized box whose edges coincide with the cell edges of ``rect``."""
    return BBox(rect.col0 / W, rect.row0 / H, rect.col1 / W, rect.row1 / H)
