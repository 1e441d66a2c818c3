"""Axis-aligned and quadrilateral box algebra in pixel units.

Shared geometric primitives: IoU, greedy NMS, and the 6-d / 18-d pairwise
box-delta features consumed by the cell merging head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box. (x, y) is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(x1, y1, x2 - x1, y2 - y1)

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x2, self.y2)

    def union(self, other: "Box") -> "Box":
        """Tightest axis-aligned box containing both inputs."""
        return Box.from_xyxy(
            min(self.x, other.x),
            min(self.y, other.y),
            max(self.x2, other.x2),
            max(self.y2, other.y2),
        )

    def intersection_area(self, other: "Box") -> float:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0.0
        return iw * ih

    def corners(self) -> np.ndarray:
        """Corner points, clockwise from top-left, shape (4, 2)."""
        return np.array(
            [[self.x, self.y], [self.x2, self.y], [self.x2, self.y2], [self.x, self.y2]],
            dtype=np.float64,
        )


def _segments_cross(p1, p2, p3, p4) -> bool:
    """True when open segments (p1,p2) and (p3,p4) properly intersect."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


@dataclass(frozen=True)
class QuadBox:
    """Quadrilateral; corner points clockwise starting at top-left.

    Stored as a tuple of four (x, y) pairs. Under the image convention
    (y grows downward) clockwise winding gives a positive shoelace sum.
    """

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.points)
        if len(pts) != 4:
            raise ValueError("QuadBox needs exactly 4 corner points")
        object.__setattr__(self, "points", pts)
        if self.signed_area() <= 0:
            raise ValueError("QuadBox corners must wind clockwise (positive area)")
        p = pts
        if _segments_cross(p[0], p[1], p[2], p[3]) or _segments_cross(p[1], p[2], p[3], p[0]):
            raise ValueError("QuadBox polygon must be simple")

    @classmethod
    def from_box(cls, box: Box) -> "QuadBox":
        return cls(tuple(map(tuple, box.corners())))

    @classmethod
    def from_array(cls, arr) -> "QuadBox":
        a = np.asarray(arr, dtype=np.float64).reshape(4, 2)
        return cls(tuple(map(tuple, a)))

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.float64)

    def signed_area(self) -> float:
        a = np.array(self.points)
        x, y = a[:, 0], a[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def hull(self) -> Box:
        """Axis-aligned bounding box of the quad."""
        a = self.as_array()
        return Box.from_xyxy(a[:, 0].min(), a[:, 1].min(), a[:, 0].max(), a[:, 1].max())


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint or merely touching boxes."""
    inter = a.intersection_area(b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(a_xyxy: np.ndarray, b_xyxy: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (N, 4) and (M, 4) xyxy arrays -> (N, M)."""
    a = np.asarray(a_xyxy, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b_xyxy, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_xyxy(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy descending-score NMS over raw arrays; returns kept indices.

    Ties in score are broken by lower input index so that the result is
    deterministic for a given input ordering.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    boxes = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(boxes)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    kept: list[int] = []
    while order.size > 0:
        i = order[0]
        kept.append(int(i))
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        ious = np.where(union > 0, inter / union, 0.0)
        order = rest[ious <= iou_threshold]
    return kept


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    """Greedy NMS over scored boxes; no two kept boxes exceed the threshold."""
    if len(boxes) == 0:
        return []
    arr = np.array([b.box.as_xyxy() for b in boxes])
    scores = np.array([b.score for b in boxes])
    return nms_xyxy(arr, scores, iou_threshold)


def box_delta(b_i: Box, b_j: Box) -> np.ndarray:
    """6-d relative scale/location feature between two boxes.

    Components: ((x_i - x_j)/w_i, (y_i - y_j)/h_i, ln(w_i/w_j), ln(h_i/h_j),
    (x_j - x_i)/w_j, (y_j - y_i)/h_j). (x, y) is the top-left corner.
    """
    return np.array(
        [
            (b_i.x - b_j.x) / b_i.w,
            (b_i.y - b_j.y) / b_i.h,
            math.log(b_i.w / b_j.w),
            math.log(b_i.h / b_j.h),
            (b_j.x - b_i.x) / b_j.w,
            (b_j.y - b_i.y) / b_j.h,
        ],
        dtype=np.float64,
    )


def spatial_compat_feature(b_i: Box, b_j: Box) -> np.ndarray:
    """18-d spatial compatibility vector for a box pair.

    Concatenates box_delta(b_i, b_j), box_delta(b_i, u), box_delta(b_j, u)
    where u is the tightest box containing both.
    """
    u = b_i.union(b_j)
    return np.concatenate([box_delta(b_i, b_j), box_delta(b_i, u), box_delta(b_j, u)])
