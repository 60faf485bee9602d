"""Oriented boxes, rotated-rectangle overlap and rotated NMS.

Boxes are ``(cx, cy, cz, w, l, h, theta)``: ``l`` runs along the heading
axis, ``w`` across it, ``h`` vertically, and ``theta`` is the heading about +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

AREA_EPS = 1e-9


def normalize_angle(theta: float) -> float:
    """Wrap into ``[-pi, pi)``."""
    return (theta + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w} l={self.l} h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a[:7]))

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    label: str = "Pedestrian"

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


def _as_box_array(box) -> np.ndarray:
    return box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)


def bev_corners(box) -> np.ndarray:
    """Counter-clockwise footprint corners, ``[4, 2]``."""
    cx, cy, _, w, l, _, th = _as_box_array(box)[:7]
    if w <= 0 or l <= 0:
        raise ValueError("degenerate zero-area box")
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a counter-clockwise convex polygon."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        src, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = src[-1]
        prev_side = side(prev)
        for cur in src:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    t = prev_side / (prev_side - cur_side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def bev_intersection(a, b) -> float:
    area = polygon_area(clip_convex(bev_corners(a), bev_corners(b)))
    return area if area > AREA_EPS else 0.0


def bev_iou(a, b) -> float:
    """Overlap of the two rotated footprints over their union."""
    a, b = _as_box_array(a), _as_box_array(b)
    inter = bev_intersection(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    return min(max(inter / union, 0.0), 1.0)


def iou3d(a, b) -> float:
    a, b = _as_box_array(a), _as_box_array(b)
    inter_bev = bev_intersection(a, b)
    lo = max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    hi = min(a[2] + a[5] / 2, b[2] + b[5] / 2)
    inter = inter_bev * max(hi - lo, 0.0)
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return min(max(inter / union, 0.0), 1.0)


def _radius(boxes: np.ndarray) -> np.ndarray:
    return 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])


def bev_iou_matrix(a: np.ndarray, b: np.ndarray, fn=bev_iou) -> np.ndarray:
    """Pairwise IoU, skipping pairs whose circumscribed circles cannot touch."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    near = dist < _radius(a)[:, None] + _radius(b)[None, :]
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = fn(a[i], b[j])
    return out


def _score_order(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
                top_k: Optional[int] = None) -> list[int]:
    """Greedy rotated NMS; returns kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    order = _score_order(scores)
    alive = np.ones(len(boxes), dtype=bool)
    radius = _radius(boxes)
    keep: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        if top_k is not None and len(keep) >= top_k:
            break
        alive[i] = False
        cand = np.nonzero(alive)[0]
        d = np.hypot(boxes[cand, 0] - boxes[i, 0], boxes[cand, 1] - boxes[i, 1])
        for j in cand[d < radius[cand] + radius[i]]:
            if bev_iou(boxes[i], boxes[j]) > iou_thresh:
                alive[j] = False
    return keep


def nms_bruteforce(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float,
                   top_k: Optional[int] = None) -> list[int]:
    """Reference O(n^2) NMS over the full pairwise IoU matrix."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    n = len(boxes)
    iou = np.array([[bev_iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]).reshape(n, n)
    keep: list[int] = []
    for i in _score_order(scores):
        if all(iou[i, k] <= iou_thresh for k in keep):
            keep.append(int(i))
    return keep if top_k is None else keep[:top_k]


def rotated_nms(dets: Sequence[Detection], iou_thresh: float, top_k: Optional[int] = None) -> list[Detection]:
    if not dets:
        return []
    boxes = np.stack([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thresh, top_k)]


def points_in_box(points: np.ndarray, box) -> np.ndarray:
    """Boolean mask of ``[M, >=3]`` points inside the oriented box."""
    cx, cy, cz, w, l, h, th = _as_box_array(box)[:7]
    dx = points[:, 0] - cx
    dy = points[:, 1] - cy
    c, s = math.cos(th), math.sin(th)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2) & (np.abs(points[:, 2] - cz) <= h / 2)
