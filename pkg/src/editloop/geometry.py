"""Box math on the rel1000 canvas.

Every geometric tool in the pipeline works in a shared relative
coordinate system: the image is mapped onto a 1000x1000 continuous
canvas, so boxes and offsets stay portable across image resolutions.
Conversion to absolute pixels happens only at the raster boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

REL_CANVAS = 1000.0

# Clamping arithmetic like (1000 - w) + w can overshoot the canvas by an
# ulp; invariant checks tolerate that much and no more.
_EPS = 1e-6


class DegenerateBox(ValueError):
    """Normalized region collapsed to zero width or height."""


def round_half_up(value: float) -> int:
    """Round half away from zero for non-negative values.

    Python's built-in round() is banker's rounding; pixel mapping wants
    the symmetric, locale-free rule instead.
    """
    return int(math.floor(value + 0.5))


@dataclass(frozen=True, slots=True)
class RelBox:
    """Axis-aligned box on the 1000x1000 relative canvas."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite rel box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"rel box has non-positive size {vals}")
        if self.x < -_EPS or self.y < -_EPS:
            raise ValueError(f"rel box origin outside canvas {vals}")
        if self.x + self.w > REL_CANVAS + _EPS or self.y + self.h > REL_CANVAS + _EPS:
            raise ValueError(f"rel box exceeds canvas {vals}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner form."""
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_list(self) -> list[float]:
        """Wire form: [x, y, w, h]."""
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, raw) -> "RelBox":
        x, y, w, h = (float(v) for v in raw)
        return cls(x, y, w, h)


@dataclass(frozen=True, slots=True)
class PixelBox:
    """Axis-aligned box in absolute pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not isinstance(v, int):
                raise ValueError(f"pixel box fields must be int, got {v!r}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"pixel box origin negative: {self}")
        if self.w < 1 or self.h < 1:
            raise ValueError(f"pixel box smaller than one pixel: {self}")

    def inside(self, dims: "ImageDims") -> bool:
        return self.x + self.w <= dims.width and self.y + self.h <= dims.height

    def to_list(self) -> list[int]:
        """Wire form: [x, y, w, h]."""
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, raw) -> "PixelBox":
        x, y, w, h = (int(v) for v in raw)
        return cls(x, y, w, h)


@dataclass(frozen=True, slots=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be positive: {self}")


@dataclass(frozen=True, slots=True)
class RelOffset:
    """Translation in rel units, [dx, dy] on the wire."""

    dx: float
    dy: float

    def __post_init__(self):
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise ValueError(f"non-finite offset {self}")

    def to_list(self) -> list[float]:
        return [self.dx, self.dy]

    @classmethod
    def from_list(cls, raw) -> "RelOffset":
        dx, dy = (float(v) for v in raw)
        return cls(dx, dy)


def _clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else (hi if v > hi else v)


def normalize_rel_box(x1: float, y1: float, x2: float, y2: float) -> RelBox:
    """Reorder corners, clamp to the canvas, and return the box.

    Zero-area regions raise DegenerateBox instead of being expanded:
    minimum-size policy belongs to the crop tool, not the math.
    """
    for v in (x1, y1, x2, y2):
        if not math.isfinite(v):
            raise ValueError(f"non-finite corner {v!r}")
    lo_x, hi_x = min(x1, x2), max(x1, x2)
    lo_y, hi_y = min(y1, y2), max(y1, y2)
    lo_x = _clamp(lo_x, 0.0, REL_CANVAS)
    hi_x = _clamp(hi_x, 0.0, REL_CANVAS)
    lo_y = _clamp(lo_y, 0.0, REL_CANVAS)
    hi_y = _clamp(hi_y, 0.0, REL_CANVAS)
    if hi_x - lo_x <= 0 or hi_y - lo_y <= 0:
        raise DegenerateBox(
            f"region ({x1}, {y1}, {x2}, {y2}) has zero area after normalization"
        )
    return RelBox(lo_x, lo_y, hi_x - lo_x, hi_y - lo_y)


def rel_to_pixel(box: RelBox, dims: ImageDims) -> PixelBox:
    """Map a rel box onto pixels, rounding edges, never leaving the image.

    Width/height come from the rounded right/bottom edges and are floored
    at one pixel so every valid rel box stays representable.
    """
    x0 = round_half_up(box.x * dims.width / REL_CANVAS)
    x1 = round_half_up((box.x + box.w) * dims.width / REL_CANVAS)
    y0 = round_half_up(box.y * dims.height / REL_CANVAS)
    y1 = round_half_up((box.y + box.h) * dims.height / REL_CANVAS)
    x1 = min(x1, dims.width)
    y1 = min(y1, dims.height)
    w = max(x1 - x0, 1)
    h = max(y1 - y0, 1)
    x0 = max(min(x0, dims.width - w), 0)
    y0 = max(min(y0, dims.height - h), 0)
    return PixelBox(x0, y0, w, h)


def pixel_to_rel(box: PixelBox, dims: ImageDims) -> RelBox:
    """Inverse linear mapping from pixels back onto the rel canvas."""
    if not box.inside(dims):
        raise ValueError(f"pixel box {box} outside image {dims}")
    return RelBox(
        box.x * REL_CANVAS / dims.width,
        box.y * REL_CANVAS / dims.height,
        box.w * REL_CANVAS / dims.width,
        box.h * REL_CANVAS / dims.height,
    )


def offset_clamped(box: RelBox, offset: RelOffset) -> RelBox:
    """Translate a box, clamping it to the canvas with its size intact.

    x' = max(0, min(1000 - w, x + dx)), and analogously for y; width and
    height are inherited unchanged, so the box never leaves the canvas.
    """
    new_x = max(0.0, min(REL_CANVAS - box.w, box.x + offset.dx))
    new_y = max(0.0, min(REL_CANVAS - box.h, box.y + offset.dy))
    return RelBox(new_x, new_y, box.w, box.h)
