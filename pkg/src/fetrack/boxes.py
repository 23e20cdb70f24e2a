"""Axis-aligned boxes in top-left (x, y, w, h) pixel convention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoxError


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def validate(self) -> "BBox":
        if not (self.w > 0 and self.h > 0) or not np.all(np.isfinite(self.as_array())):
            raise BoxError(f"degenerate box {self}")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BBox":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, w, h)

    def clamp(self, width: int, height: int, min_size: float = 1.0) -> "BBox":
        """Clip to the image rectangle, keeping at least ``min_size`` pixels of extent."""
        w = float(np.clip(self.w, min_size, width))
        h = float(np.clip(self.h, min_size, height))
        x = float(np.clip(self.x, 0.0, width - w))
        y = float(np.clip(self.y, 0.0, height - h))
        return BBox(x, y, w, h)


def box_iou(a, b) -> np.ndarray:
    """Vectorised IoU between box arrays of shape (..., 4)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # areas from the same corner differences as the intersection, so identical boxes give exactly 1
    a1, b1 = a[..., :2] + a[..., 2:], b[..., :2] + b[..., 2:]
    ix = np.clip(np.minimum(a1[..., 0], b1[..., 0]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    iy = np.clip(np.minimum(a1[..., 1], b1[..., 1]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = ix * iy
    area_a = (a1[..., 0] - a[..., 0]) * (a1[..., 1] - a[..., 1])
    area_b = (b1[..., 0] - b[..., 0]) * (b1[..., 1] - b[..., 1])
    return np.clip(inter / (area_a + area_b - inter), 0.0, 1.0)
