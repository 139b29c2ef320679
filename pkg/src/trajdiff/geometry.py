"""Oriented rectangles and the separating-axis intersection test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    heading: float
    length: float
    width: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.heading, self.length, self.width)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.length}x{self.width}")
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def axes(self) -> np.ndarray:
        """Unit vectors along the length and the width, as rows."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        """(4, 2) corners in counter-clockwise order."""
        u, v = self.axes
        hl, hw = 0.5 * self.length, 0.5 * self.width
        center = np.array([self.cx, self.cy])
        return np.stack([
            center + hl * u + hw * v,
            center - hl * u + hw * v,
            center - hl * u - hw * v,
            center + hl * u - hw * v,
        ])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Express world points (..., 2) in the box frame (along length, along width)."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx = points[..., 0] - self.cx
        dy = points[..., 1] - self.cy
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def inflated(self, margin: float) -> OrientedBox:
        return OrientedBox(self.cx, self.cy, self.heading, self.length + 2 * margin, self.width + 2 * margin)

    def moved(self, dx: float, dy: float, dheading: float = 0.0) -> OrientedBox:
        return OrientedBox(self.cx + dx, self.cy + dy, self.heading + dheading, self.length, self.width)


def _project(corners: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    dots = corners @ axis
    return float(dots.min()), float(dots.max())


def boxes_intersect(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test over the four edge normals. Touching counts as intersecting."""
    ca, cb = a.corners(), b.corners()
    for axis in (*a.axes, *b.axes):
        lo_a, hi_a = _project(ca, axis)
        lo_b, hi_b = _project(cb, axis)
        if hi_a < lo_b or hi_b < lo_a:
            return False
    return True


def separation(a: OrientedBox, b: OrientedBox) -> float:
    """Signed SAT margin: the largest projected gap over the four axes.

    Positive means separated by at least that distance along some axis, negative
    is a penetration depth. Used to stay clear of near-touching configurations.
    """
    ca, cb = a.corners(), b.corners()
    best = -math.inf
    for axis in (*a.axes, *b.axes):
        lo_a, hi_a = _project(ca, axis)
        lo_b, hi_b = _project(cb, axis)
        best = max(best, lo_b - hi_a, lo_a - hi_b)
    return best
