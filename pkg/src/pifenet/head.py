"""Anchor head: anchors, residual box coding, target assignment and losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .geometry import Box3D, bev_iou_matrix
from .nn import Conv2d, Module
from .pillars import PillarConfig
from .tensor import Tensor

BOX_DIM = 7
POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class AnchorSpec:
    w: float = 0.6
    l: float = 0.8
    h: float = 1.73
    rotations: tuple[float, ...] = (0.0, math.pi / 2)

    @property
    def per_cell(self) -> int:
        return len(self.rotations)


def make_anchors(cfg: PillarConfig, spec: AnchorSpec = AnchorSpec()) -> np.ndarray:
    """``[H * W * N_a, 7]`` anchors ordered (row y, column x, rotation)."""
    H, W = cfg.grid_y, cfg.grid_x
    xs = cfg.x_min + (np.arange(W) + 0.5) * cfg.pillar_x
    ys = cfg.y_min + (np.arange(H) + 0.5) * cfg.pillar_y
    zc = 0.5 * (cfg.z_min + cfg.z_max)
    gy, gx, rot = np.meshgrid(ys, xs, np.asarray(spec.rotations), indexing="ij")
    n = gy.size
    anchors = np.empty((n, BOX_DIM))
    anchors[:, 0] = gx.reshape(-1)
    anchors[:, 1] = gy.reshape(-1)
    anchors[:, 2] = zc
    anchors[:, 3] = spec.w
    anchors[:, 4] = spec.l
    anchors[:, 5] = spec.h
    anchors[:, 6] = rot.reshape(-1)
    return anchors


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residuals ``(dx/d, dy/d, dz/h_a, log w/w_a, log l/l_a, log h/h_a, sin(dtheta))``."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, BOX_DIM)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, BOX_DIM)
    if (gt[:, 3:6] <= 0).any() or (a[:, 3:6] <= 0).any():
        raise ValueError("box sizes must be positive")
    d = np.hypot(a[:, 3], a[:, 4])
    return np.stack([
        (gt[:, 0] - a[:, 0]) / d,
        (gt[:, 1] - a[:, 1]) / d,
        (gt[:, 2] - a[:, 2]) / a[:, 5],
        np.log(gt[:, 3] / a[:, 3]),
        np.log(gt[:, 4] / a[:, 4]),
        np.log(gt[:, 5] / a[:, 5]),
        np.sin(gt[:, 6] - a[:, 6]),
    ], axis=1)


def decode_boxes(pred: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64).reshape(-1, BOX_DIM)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, BOX_DIM)
    d = np.hypot(a[:, 3], a[:, 4])
    theta = a[:, 6] + np.arcsin(np.clip(p[:, 6], -1.0, 1.0))
    return np.stack([
        p[:, 0] * d + a[:, 0],
        p[:, 1] * d + a[:, 1],
        p[:, 2] * a[:, 5] + a[:, 2],
        np.exp(p[:, 3]) * a[:, 3],
        np.exp(p[:, 4]) * a[:, 4],
        np.exp(p[:, 5]) * a[:, 5],
        (theta + np.pi) % (2 * np.pi) - np.pi,
    ], axis=1)


def encode_box(gt: Box3D, anchor: Box3D) -> np.ndarray:
    return encode_boxes(gt.as_array(), anchor.as_array())[0]


def decode_box(pred, anchor: Box3D) -> Box3D:
    return Box3D.from_array(decode_boxes(pred, anchor.as_array())[0])


@dataclass
class TargetAssignment:
    labels: np.ndarray  # [A] POSITIVE / NEGATIVE / IGNORE
    gt_index: np.ndarray  # [A] matched ground truth, -1 otherwise
    reg_targets: np.ndarray  # [A, 7]; zero for non-positives

    @property
    def num_positives(self) -> int:
        return int((self.labels == POSITIVE).sum())


def assign_targets(anchors: np.ndarray, gts: np.ndarray, pos_iou: float = 0.5,
                   neg_iou: float = 0.35) -> TargetAssignment:
    """BEV-IoU matching with a forced best anchor for every overlapped ground truth."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, BOX_DIM)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, BOX_DIM)
    A = len(anchors)
    labels = np.full(A, NEGATIVE, dtype=np.int8)
    gt_index = np.full(A, -1, dtype=np.int64)
    targets = np.zeros((A, BOX_DIM))
    if len(gts) == 0:
        return TargetAssignment(labels, gt_index, targets)
    iou = bev_iou_matrix(anchors, gts)
    best_gt = iou.argmax(axis=1)
    best = iou[np.arange(A), best_gt]
    labels[best >= neg_iou] = IGNORE
    pos = best >= pos_iou
    labels[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]
    for g in range(len(gts)):
        col = iou[:, g]
        a = int(col.argmax())
        if col[a] > 0:
            labels[a] = POSITIVE
            gt_index[a] = g
    pos = labels == POSITIVE
    targets[pos] = encode_boxes(gts[gt_index[pos]], anchors[pos])
    return TargetAssignment(labels, gt_index, targets)


@dataclass
class LossBreakdown:
    cls_loss: Tensor
    reg_loss: Tensor
    total: Tensor
    num_positives: int

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "cls": self.cls_loss.item(), "reg": self.reg_loss.item(),
                "num_positives": self.num_positives}


def focal_loss(cls_logits: Tensor, assignment: TargetAssignment, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Binary focal loss over anchors (single class), normalised by the positive count."""
    labels = assignment.labels
    flat = cls_logits.reshape(labels.shape[0], -1)
    targets = (labels == POSITIVE).astype(np.float64)[:, None]
    weights = (labels != IGNORE).astype(np.float64)[:, None]
    norm = max(1, assignment.num_positives)
    return ops.sigmoid_focal_loss(flat, targets, weights, alpha, gamma) / float(norm)


def reg_loss(reg: Tensor, assignment: TargetAssignment, smooth_beta: float = 0.0) -> Tensor:
    """Sum of absolute residual errors over positives' 7-vectors, per positive."""
    flat = reg.reshape(assignment.labels.shape[0], BOX_DIM)
    weights = (assignment.labels == POSITIVE).astype(np.float64)
    norm = max(1, assignment.num_positives)
    return ops.l1_loss(flat, assignment.reg_targets, weights, smooth_beta) / float(norm)


def detection_loss(cls_logits: Tensor, reg: Tensor, assignment: TargetAssignment, alpha: float = 0.25,
                   gamma: float = 2.0, reg_weight: float = 2.0, smooth_beta: float = 0.0) -> LossBreakdown:
    c = focal_loss(cls_logits, assignment, alpha, gamma)
    r = reg_loss(reg, assignment, smooth_beta)
    return LossBreakdown(c, r, c + reg_weight * r, assignment.num_positives)


class DetectionHead(Module):
    """Two 1x1 conv branches: class logits ``[H, W, N_a*N_c]`` and residuals ``[H, W, N_a*7]``."""

    def __init__(self, in_channels: int, rng: np.random.Generator, anchors_per_cell: int = 2,
                 num_classes: int = 1, prior: float = 0.01):
        self.cls = Conv2d(in_channels, anchors_per_cell * num_classes, 1, rng, init_std=0.01)
        self.reg = Conv2d(in_channels, anchors_per_cell * BOX_DIM, 1, rng, init_std=0.01)
        self.cls.bias.data[:] = -math.log((1 - prior) / prior)

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls(features), self.reg(features)


def head_forward(features: Tensor, head: DetectionHead) -> tuple[Tensor, Tensor]:
    return head(features)
