"""Binary-mask and bounding-box primitives: RLE codec, mask->bbox, IoU, greedy NMS.

Boxes are integer-pixel (x, y, w, h) with area = w * h, matching the BOP/COCO
result convention. Masks are run-length encoded in row-major order; runs
alternate background/foreground and always start with a background run (which
may be zero-length). All functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyMaskError, MalformedRleError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, (x, y) top-left corner, zero-based pixel coordinates."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise TypeError(f"box field {name!r} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box size must be at least 1x1, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits_within(self, width: int, height: int) -> bool:
        """Whether the box lies entirely inside a width x height image."""
        return self.x + self.w <= width and self.y + self.h <= height

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class BinaryMask:
    """Row-major RLE mask; sum of runs must equal width * height.

    Canonical form: only the leading background run may be zero-length, every
    other run is positive. Non-canonical runs are rejected so that the codec
    is a bijection.
    """

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise MalformedRleError(f"mask dimensions must be >= 1x1, got {self.width}x{self.height}")
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if not runs:
            raise MalformedRleError("run list is empty")
        if any(r < 0 for r in runs):
            raise MalformedRleError(f"negative run length in {runs}")
        if any(r == 0 for r in runs[1:]):
            raise MalformedRleError("zero-length run after the first (non-canonical encoding)")
        total = sum(runs)
        expected = self.width * self.height
        if total != expected:
            raise MalformedRleError(f"run lengths sum to {total}, expected {self.width}x{self.height} = {expected}")

    @property
    def foreground_area(self) -> int:
        """Number of foreground pixels (sum of the odd-position runs)."""
        return sum(self.runs[1::2])

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "BinaryMask":
        return rle_encode(dense)

    def to_dense(self) -> np.ndarray:
        return rle_decode(self)


def rle_encode(dense: np.ndarray) -> BinaryMask:
    """Encode a 2D bitmap (any dtype, nonzero = foreground) into RLE form."""
    arr = np.asarray(dense)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2D bitmap, got shape {arr.shape}")
    flat = arr.astype(bool).ravel()
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [flat.size]))
    runs = (ends - starts).tolist()
    if flat[0]:
        runs.insert(0, 0)
    height, width = arr.shape
    return BinaryMask(width=width, height=height, runs=tuple(runs))


def rle_decode(mask: BinaryMask) -> np.ndarray:
    """Decode an RLE mask into a height x width bool bitmap."""
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    return flat.reshape(mask.height, mask.width)


def mask_to_bbox(mask: BinaryMask) -> BoundingBox:
    """Tightest axis-aligned box containing every foreground pixel."""
    dense = rle_decode(mask)
    rows, cols = np.nonzero(dense)
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixel")
    min_row, max_row = int(rows.min()), int(rows.max())
    min_col, max_col = int(cols.min()), int(cols.max())
    return BoundingBox(x=min_col, y=min_row, w=max_col - min_col + 1, h=max_row - min_row + 1)


@dataclass(frozen=True)
class MaskProposal:
    """One candidate region: mask plus generator quality scores.

    ``bbox`` and ``area_px`` are derived from the mask at construction time.
    Proposals from sources that report no quality scores default both to 1.0
    so that purely geometric inputs still flow through score filters.
    """

    mask: BinaryMask
    generator_iou: float = 1.0
    stability: float = 1.0
    bbox: BoundingBox = field(init=False)
    area_px: int = field(init=False)

    def __post_init__(self) -> None:
        for name in ("generator_iou", "stability"):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "bbox", mask_to_bbox(self.mask))
        object.__setattr__(self, "area_px", self.mask.foreground_area)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union with pixel-area semantics; 0.0 when disjoint."""
    ix = max(a.x, b.x)
    iy = max(a.y, b.y)
    ix2 = min(a.x + a.w, b.x + b.w)
    iy2 = min(a.y + a.h, b.y + b.h)
    iw = ix2 - ix
    ih = iy2 - iy
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def nms(items: Sequence[tuple[BoundingBox, float]], threshold: float) -> list[int]:
    """Greedy non-maximum suppression over (box, score) pairs.

    Items are visited by descending score, ties broken by ascending input
    index; an item is kept iff its IoU with every already-kept item is at
    most ``threshold``. Returns the retained indices in keep order.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"NMS threshold must be in [0, 1], got {threshold}")
    for index, (_, score) in enumerate(items):
        if not math.isfinite(score):
            raise ValueError(f"score at index {index} is not finite: {score}")
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], i))
    keep: list[int] = []
    for i in order:
        box = items[i][0]
        if all(box_iou(box, items[j][0]) <= threshold for j in keep):
            keep.append(i)
    return keep
