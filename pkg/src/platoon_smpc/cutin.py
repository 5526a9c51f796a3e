"""Bad-set geometry and the cut-in probability.

Every predicted step gives a rectangle (centre +- 90% half-widths, inflated
by half the remote vehicle's footprint). Each rectangle is intersected with
the host's bad-set at that future instant and the overlap is divided by the
rectangle's area; P_c is the largest of these ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .predictor import PredictionFan

LANE_WIDTH = 3.7


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in the road frame: [x0, x1] x [y0, y1]."""

    x0: float
    x1: float
    y0: float
    y1: float

    @property
    def area(self) -> float:
        return max(self.x1 - self.x0, 0.0) * max(self.y1 - self.y0, 0.0)

    def translated(self, dx: float, dy: float) -> "Rect":
        return Rect(self.x0 + dx, self.x1 + dx, self.y0 + dy, self.y1 + dy)


@dataclass(frozen=True)
class BadSet:
    """Area ahead of the host front bumper, one lane wide.

    ``rear_center`` is the host's front-bumper position; the set extends
    ``length`` forward from it and ``width / 2`` to either side.
    """

    rear_center: Tuple[float, float]
    length: float
    width: float = LANE_WIDTH

    @classmethod
    def for_host(cls, x_front: float, y: float, v: float, h: float, d0: float, width: float = LANE_WIDTH):
        return cls((x_front, y), h * v + d0, width)

    @property
    def rect(self) -> Rect:
        x, y = self.rear_center
        return Rect(x, x + max(self.length, 0.0), y - self.width / 2, y + self.width / 2)


@dataclass(frozen=True)
class CutinProbability:
    value: float
    argmax_step: int
    per_step: np.ndarray


def overlap(a: Rect, b: Rect) -> float:
    dx = min(a.x1, b.x1) - max(a.x0, b.x0)
    dy = min(a.y1, b.y1) - max(a.y0, b.y0)
    return dx * dy if dx > 0 and dy > 0 else 0.0


def rect_intersection_ratio(pred_rect: Rect, bad_set) -> float:
    """Fraction of ``pred_rect`` lying inside the bad-set (a BadSet or Rect)."""
    area = pred_rect.area
    if area <= 0:
        raise ValueError("prediction rectangle must have positive area")
    box = bad_set.rect if isinstance(bad_set, BadSet) else bad_set
    return min(max(overlap(pred_rect, box) / area, 0.0), 1.0)


def fan_rects(fan: PredictionFan, vehicle_length: float = 0.0, vehicle_width: float = 0.0):
    ex, ey = vehicle_length / 2, vehicle_width / 2
    return [
        Rect(x - hx - ex, x + hx + ex, y - hy - ey, y + hy + ey)
        for x, y, hx, hy in zip(fan.long_pred, fan.lat_pred, fan.long_halfwidth, fan.lat_halfwidth)
    ]


def compute_pc(
    fan: PredictionFan,
    host_future: Sequence[Sequence[float]],
    h: float,
    d0: float,
    lane_width: float = LANE_WIDTH,
    vehicle_length: float = 0.0,
    vehicle_width: float = 0.0,
) -> CutinProbability:
    """P_c of one predicted fan against the host's future bad-sets.

    ``host_future`` holds one ``(x_front, y, v)`` row per predicted step.
    The remote vehicle's centre rectangles are inflated by half its length
    and width.
    """
    host_future = np.asarray(host_future, dtype=float)
    if host_future.ndim != 2 or host_future.shape[0] != fan.steps:
        raise ValueError(f"host_future has {len(host_future)} rows, fan has {fan.steps} steps")
    ratios = np.array([
        rect_intersection_ratio(r, BadSet.for_host(hx, hy, hv, h, d0, lane_width))
        for r, (hx, hy, hv) in zip(fan_rects(fan, vehicle_length, vehicle_width), host_future)
    ])
    k = int(np.argmax(ratios))
    return CutinProbability(float(ratios[k]), k + 1, ratios)
