"""Oriented boxes on the BEV plane and rotated IoU by convex polygon clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle on the ground plane. ``l`` runs along the heading ``yaw``."""

    cx: float
    cy: float
    w: float
    l: float
    yaw: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w} l={self.l}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.l, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, arr, class_id: int = 0) -> "OrientedBox":
        cx, cy, w, l, yaw = (float(v) for v in arr[:5])
        return cls(cx, cy, w, l, yaw, class_id)

    @property
    def area(self) -> float:
        return self.w * self.l


def wrap_angle(a):
    """Wrap to [-pi, pi); angles already in range are returned unchanged."""
    a = np.asarray(a)
    return np.where((a >= -math.pi) & (a < math.pi), a, (a + math.pi) % (2 * math.pi) - math.pi)


def wrap_half_pi(a):
    """Wrap to [-pi/2, pi/2); boxes are symmetric under a half turn."""
    a = np.asarray(a)
    return np.where((a >= -math.pi / 2) & (a < math.pi / 2), a, (a + math.pi / 2) % math.pi - math.pi / 2)


def box_corners(cx, cy, w, l, yaw) -> np.ndarray:
    """Counter-clockwise corners, shape (4, 2)."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2.0, w / 2.0
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    pts = [(cx + c * u - s * v, cy + s * u + c * v) for u, v in local]
    return np.array(pts, dtype=np.float64)


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _box_tuple(b):
    if isinstance(b, OrientedBox):
        return b.cx, b.cy, b.w, b.l, b.yaw
    cx, cy, w, l, yaw = (float(v) for v in b[:5])
    if not (w > 0 and l > 0):
        raise ValueError(f"zero-area box: w={w} l={l}")
    return cx, cy, w, l, yaw


def rotated_iou(a, b) -> float:
    """IoU of two rotated rectangles (OrientedBox or [cx, cy, w, l, yaw])."""
    ta, tb = _box_tuple(a), _box_tuple(b)
    area_a, area_b = ta[2] * ta[3], tb[2] * tb[3]
    # bounding-circle rejection
    ra = 0.5 * math.hypot(ta[2], ta[3])
    rb = 0.5 * math.hypot(tb[2], tb[3])
    if math.hypot(ta[0] - tb[0], ta[1] - tb[1]) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(box_corners(*ta), box_corners(*tb)))
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def rotated_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 2], a[:, 3])
    rb = 0.5 * np.hypot(b[:, 2], b[:, 3])
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    for i, j in zip(*np.nonzero(d < ra[:, None] + rb[None, :])):
        out[i, j] = rotated_iou(a[i], b[j])
    return out


def points_in_box(px, py, box) -> np.ndarray:
    """Boolean mask of points strictly inside or on the boundary of ``box``."""
    cx, cy, w, l, yaw = _box_tuple(box)
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = np.asarray(px) - cx, np.asarray(py) - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= l / 2.0) & (np.abs(v) <= w / 2.0)
