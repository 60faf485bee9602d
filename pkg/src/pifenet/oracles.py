"""Independent reference computations used by the self-test and the test suite.

None of these share code with the paths they check: overlap is estimated by
stratified sampling, and average precision is recomputed from the raw
precision/recall polyline with exact rational arithmetic.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def _inside(points: np.ndarray, box) -> np.ndarray:
    cx, cy, cz, w, l, h, th = box
    dx, dy = points[:, 0] - cx, points[:, 1] - cy
    u = math.cos(th) * dx + math.sin(th) * dy
    v = -math.sin(th) * dx + math.cos(th) * dy
    ok = (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)
    if points.shape[1] > 2:
        ok &= np.abs(points[:, 2] - cz) <= h / 2
    return ok


def _bounds(boxes, dims: int):
    lo, hi = [], []
    for b in boxes:
        r = 0.5 * math.hypot(b[3], b[4])
        lo.append([b[0] - r, b[1] - r, b[2] - b[5] / 2][:dims])
        hi.append([b[0] + r, b[1] + r, b[2] + b[5] / 2][:dims])
    return np.min(lo, axis=0), np.max(hi, axis=0)


def _stratified(lo, hi, per_axis: int, rng: np.random.Generator) -> np.ndarray:
    dims = len(lo)
    grids = np.meshgrid(*[np.arange(per_axis)] * dims, indexing="ij")
    cells = np.stack([g.reshape(-1) for g in grids], axis=1)
    jitter = rng.random(cells.shape)
    return lo + (cells + jitter) / per_axis * (hi - lo)


def monte_carlo_iou(a, b, samples: int = 1_000_000, mode: str = "bev", seed: int = 0) -> float:
    """IoU by jittered-grid sampling of the joint bounding region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dims = 2 if mode == "bev" else 3
    per_axis = int(round(samples ** (1 / dims)))
    lo, hi = _bounds([a, b], dims)
    pts = _stratified(lo, hi, per_axis, np.random.default_rng(seed))
    ia, ib = _inside(pts, a), _inside(pts, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def brute_force_ap40(frames, iou_fn, iou_thresh: float) -> float:
    """AP over 40 recall positions from an explicit PR polyline.

    ``frames`` is a list of ``(dets, gts, considered)`` where ``dets`` are
    ``(box, score)`` pairs. Returns ``nan`` when no ground truth counts.
    """
    entries = []
    for f, (dets, _, _) in enumerate(frames):
        for d, (_, score) in enumerate(dets):
            entries.append((-score, f, d))
    entries.sort()
    used = [set() for _ in frames]
    outcomes = []
    for _, f, d in entries:
        box = frames[f][0][d][0]
        gts, considered = frames[f][1], frames[f][2]
        cands = []
        for g, gt in enumerate(gts):
            if g in used[f]:
                continue
            iou = iou_fn(box, gt)
            if iou >= iou_thresh:
                cands.append((not considered[g], -iou, g))
        if not cands:
            outcomes.append(False)
            continue
        ignored, _, g = min(cands)
        used[f].add(g)
        if not ignored:
            outcomes.append(True)
    num_gt = sum(sum(1 for c in fr[2] if c) for fr in frames)
    if num_gt == 0:
        return float("nan")
    polyline = []
    tp = fp = 0
    for hit in outcomes:
        tp += hit
        fp += not hit
        polyline.append((Fraction(tp, num_gt), Fraction(tp, tp + fp)))
    total = Fraction(0)
    for i in range(1, 41):
        r = Fraction(i, 40)
        reach = [p for rec, p in polyline if rec >= r]
        total += max(reach) if reach else 0
    return float(total / 40)
