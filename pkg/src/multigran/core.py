"""Geometry and mask primitives shared by the rest of the package.

Boxes are stored center-form ``(cx, cy, w, h)`` as fractions of the image
size. Corner form ``(x1, y1, x2, y2)`` only appears at API edges.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate boxes, mismatched masks or malformed run strings."""


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"degenerate box: w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise GeometryError(f"box center outside frame: ({self.cx}, {self.cy})")
        if self.w > 1.0 or self.h > 1.0:
            raise GeometryError(f"box larger than frame: w={self.w}, h={self.h}")

    def to_corners(self) -> tuple[float, float, float, float]:
        x1 = min(max(self.cx - 0.5 * self.w, 0.0), 1.0)
        y1 = min(max(self.cy - 0.5 * self.h, 0.0), 1.0)
        x2 = min(max(self.cx + 0.5 * self.w, 0.0), 1.0)
        y2 = min(max(self.cy + 0.5 * self.h, 0.0), 1.0)
        return (x1, y1, x2, y2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        if not (x1 < x2 and y1 < y2):
            raise GeometryError(f"degenerate corners: ({x1}, {y1}, {x2}, {y2})")
        return cls(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.to_corners()
        return (x2 - x1) * (y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def box_convert(b: Union[Box, Sequence[float]], direction: str):
    """Convert between center form and corner form.

    ``direction="to_corners"`` takes a :class:`Box` and returns ``(x1, y1, x2, y2)``;
    ``direction="from_corners"`` takes a corner quadruple and returns a :class:`Box`.
    """
    if direction == "to_corners":
        if not isinstance(b, Box):
            b = Box(*b)
        return b.to_corners()
    if direction == "from_corners":
        return Box.from_corners(*b)
    raise ValueError(f"unknown direction {direction!r}")


def box_iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise GeometryError(f"mask must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "data", _frozen(arr.astype(bool)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))

    def tight_box(self) -> Optional[Box]:
        """Tight normalized box around the set pixels; ``None`` for an empty mask."""
        ys, xs = np.nonzero(self.data)
        if len(xs) == 0:
            return None
        return Box.from_corners(
            xs.min() / self.width, ys.min() / self.height,
            (xs.max() + 1) / self.width, (ys.max() + 1) / self.height,
        )


@dataclass(frozen=True, eq=False)
class SoftMask:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise GeometryError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all()):
            raise GeometryError("soft mask values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def threshold(self, confidence: float = 0.5) -> BinaryMask:
        return BinaryMask(self.data > confidence)


def box_to_mask(box: Box, height: int, width: int) -> BinaryMask:
    """Rasterize a box; every pixel touched by the box is set."""
    x1, y1, x2, y2 = box.to_corners()
    c0 = int(np.floor(round(x1 * width, 9)))
    r0 = int(np.floor(round(y1 * height, 9)))
    c1 = int(np.ceil(round(x2 * width, 9)))
    r1 = int(np.ceil(round(y2 * height, 9)))
    out = np.zeros((height, width), dtype=bool)
    out[r0:r1, c0:c1] = True
    return BinaryMask(out)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.data.shape != b.data.shape:
        raise GeometryError(f"mask shapes differ: {a.data.shape} vs {b.data.shape}")
    inter = np.logical_and(a.data, b.data).sum()
    union = np.logical_or(a.data, b.data).sum()
    if union == 0:
        return 0.0
    return float(inter) / float(union)


def rle_encode(m: BinaryMask) -> str:
    """Row-major run lengths, comma separated, always starting with a 0-run."""
    flat = m.data.reshape(-1).astype(np.int8)
    if flat.size == 0:
        return "0"
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return ",".join(str(r) for r in runs)


def rle_decode(runs: str, height: int, width: int) -> BinaryMask:
    try:
        counts = [int(tok) for tok in runs.split(",")] if runs.strip() else []
    except ValueError as exc:
        raise GeometryError(f"malformed run string: {exc}") from None
    if any(c < 0 for c in counts):
        raise GeometryError("negative run length")
    total = sum(counts)
    if total != height * width:
        raise GeometryError(f"run lengths sum to {total}, expected {height * width}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    for i, c in enumerate(counts):
        if i % 2 == 1:
            flat[pos:pos + c] = True
        pos += c
    return BinaryMask(flat.reshape(height, width))


@dataclass(frozen=True)
class Annotation:
    """One instance or stuff region.

    ``label`` is a category index for word-based data or a phrase for
    sentence-based data. ``box`` must be the tight box of ``mask``.
    ``has_mask`` is False for box-only sources (detection, grounding), in
    which case ``mask`` is the rasterized box and no mask loss is applied.
    """

    label: Union[int, str]
    box: Box
    mask: BinaryMask
    is_thing: bool = True
    has_mask: bool = True

    def __post_init__(self):
        if self.has_mask:
            tight = self.mask.tight_box()
            if tight is None:
                raise GeometryError("annotation mask is empty")
            if not np.allclose(tight.as_array(), self.box.as_array(), atol=1e-9):
                raise GeometryError(f"box {self.box} is not the tight box of the mask ({tight})")

    @classmethod
    def from_mask(cls, label, mask: BinaryMask, is_thing: bool = True) -> "Annotation":
        box = mask.tight_box()
        if box is None:
            raise GeometryError("annotation mask is empty")
        return cls(label=label, box=box, mask=mask, is_thing=is_thing)


@dataclass(frozen=True, eq=False)
class LabeledImage:
    image: np.ndarray
    annotations: tuple = ()
    captions: tuple = ()
    image_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise GeometryError(f"image must be HxWx3 RGB, got shape {img.shape}")
        object.__setattr__(self, "image", _frozen(img.astype(np.uint8)))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "captions", tuple(self.captions))
        if len(self.captions) > 4:
            raise GeometryError(f"at most 4 captions per image, got {len(self.captions)}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]
