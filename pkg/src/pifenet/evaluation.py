"""Score-greedy matching and 40-recall-position average precision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import Box3D, Detection, bev_iou, iou3d

NUM_RECALL_POSITIONS = 40

# easy / moderate / hard
MIN_HEIGHT = (40.0, 25.0, 25.0)
MAX_OCCLUSION = (0, 1, 2)
MAX_TRUNCATION = (0.15, 0.30, 0.50)
LEVELS = ("easy", "moderate", "hard")


@dataclass(frozen=True)
class GroundTruth:
    box: Box3D
    label: str = "Pedestrian"
    truncation: float = 0.0
    occlusion: int = 0
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 100.0)

    @property
    def height_px(self) -> float:
        return self.bbox[3] - self.bbox[1]


def difficulty_mask(gts: Sequence[GroundTruth], level: str) -> np.ndarray:
    """True where a ground truth counts at ``level``; the rest are ignored."""
    if level == "all":
        return np.ones(len(gts), dtype=bool)
    if level not in LEVELS:
        raise ValueError(f"unknown difficulty {level!r}")
    k = LEVELS.index(level)
    return np.array([g.height_px >= MIN_HEIGHT[k] and g.occlusion <= MAX_OCCLUSION[k]
                     and g.truncation <= MAX_TRUNCATION[k] for g in gts], dtype=bool)


def difficulty_filter(gts: Sequence[GroundTruth], level: str) -> list[GroundTruth]:
    mask = difficulty_mask(gts, level)
    return [g for g, m in zip(gts, mask) if m]


@dataclass
class Frame:
    detections: list[Detection]
    gt_boxes: list[Box3D]
    gt_considered: Optional[np.ndarray] = None  # False marks ignored ground truth

    def considered(self) -> np.ndarray:
        if self.gt_considered is None:
            return np.ones(len(self.gt_boxes), dtype=bool)
        return np.asarray(self.gt_considered, dtype=bool)


@dataclass
class PRCurve:
    recalls: np.ndarray  # 41 positions 0, 1/40, ..., 1
    precisions: np.ndarray  # interpolated precision at each position
    ap: Optional[float]
    tp: int
    fp: int
    fn: int
    num_gt: int
    matches: list[tuple[int, int, int, float]] = field(default_factory=list)  # frame, det, gt, iou


IOU_FNS: dict[str, Callable] = {"bev": bev_iou, "3d": iou3d}


def match_detections(frames: Sequence[Frame], iou_thresh: float, mode: str = "bev"):
    """Walk detections in descending score and pair each with its best free ground truth.

    Returns ``(scores, is_tp, matches)`` over the detections that count; a
    detection whose best overlap is an ignored ground truth is dropped.
    Equal scores keep frame-major input order.
    """
    iou_fn = IOU_FNS[mode]
    flat = [(f, d) for f, frame in enumerate(frames) for d in range(len(frame.detections))]
    scores = np.array([frames[f].detections[d].score for f, d in flat], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    taken = [np.zeros(len(fr.gt_boxes), dtype=bool) for fr in frames]
    considered = [fr.considered() for fr in frames]
    kept_scores, is_tp, matches = [], [], []
    for k in order:
        f, d = flat[k]
        det = frames[f].detections[d]
        best, best_iou = -1, iou_thresh
        best_ignored, best_ignored_iou = -1, iou_thresh
        for g, gt in enumerate(frames[f].gt_boxes):
            if taken[f][g]:
                continue
            iou = iou_fn(det.box, gt)
            if iou < iou_thresh:
                continue
            if considered[f][g]:
                if best < 0 or iou > best_iou:
                    best, best_iou = g, iou
            elif best_ignored < 0 or iou > best_ignored_iou:
                best_ignored, best_ignored_iou = g, iou
        if best >= 0:
            taken[f][best] = True
            kept_scores.append(det.score)
            is_tp.append(True)
            matches.append((f, d, best, best_iou))
        elif best_ignored >= 0:
            taken[f][best_ignored] = True
        else:
            kept_scores.append(det.score)
            is_tp.append(False)
    return np.array(kept_scores), np.array(is_tp, dtype=bool), matches


def interpolated_precisions(is_tp: np.ndarray, num_gt: int) -> np.ndarray:
    """Right-max interpolated precision at the 41 recall positions ``i / 40``."""
    R = NUM_RECALL_POSITIONS
    out = np.zeros(R + 1)
    if len(is_tp) == 0 or num_gt == 0:
        return out
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    precision = tp / (tp + fp)
    right_max = np.maximum.accumulate(precision[::-1])[::-1]
    for i in range(R + 1):
        # first prefix whose recall tp/num_gt reaches i/R (integer test, no rounding)
        k = np.searchsorted(tp * R, i * num_gt, side="left")
        if k < len(tp):
            out[i] = right_max[k]
    return out


def ap40(frames: Sequence[Frame], iou_thresh: float = 0.5, mode: str = "bev") -> PRCurve:
    num_gt = int(sum(fr.considered().sum() for fr in frames))
    _, is_tp, matches = match_detections(frames, iou_thresh, mode)
    precisions = interpolated_precisions(is_tp, num_gt)
    tp = int(is_tp.sum())
    ap = float(precisions[1:].mean()) if num_gt else None
    return PRCurve(recalls=np.arange(NUM_RECALL_POSITIONS + 1) / NUM_RECALL_POSITIONS,
                   precisions=precisions, ap=ap, tp=tp, fp=int(len(is_tp) - tp),
                   fn=num_gt - tp, num_gt=num_gt, matches=matches)


@dataclass
class EvalReport:
    iou_thresh: float
    results: dict[tuple[str, str], PRCurve]  # (mode, level) -> curve

    def ap(self, mode: str, level: str) -> Optional[float]:
        return self.results[(mode, level)].ap

    def to_dict(self) -> dict:
        return {
            "schema": "pifenet.eval/1",
            "iou_threshold": self.iou_thresh,
            "results": [
                {"mode": mode, "difficulty": level, "ap40": c.ap, "tp": c.tp, "fp": c.fp, "fn": c.fn,
                 "num_gt": c.num_gt}
                for (mode, level), c in self.results.items()
            ],
        }


def evaluate(dets_per_frame: Sequence[Sequence[Detection]], gts_per_frame: Sequence[Sequence[GroundTruth]],
             iou_thresh: float = 0.5, levels: Sequence[str] = ("all",), modes=("bev", "3d"),
             label: str = "Pedestrian") -> EvalReport:
    results = {}
    for mode in modes:
        for level in levels:
            frames = []
            for dets, gts in zip(dets_per_frame, gts_per_frame):
                gts = [g for g in gts if g.label == label]
                frames.append(Frame([d for d in dets if d.label == label], [g.box for g in gts],
                                    difficulty_mask(gts, level)))
            results[(mode, level)] = ap40(frames, iou_thresh, mode)
    return EvalReport(iou_thresh, results)
