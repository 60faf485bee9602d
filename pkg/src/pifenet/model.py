"""End-to-end network: pillar encoder, scatter, fusion backbone, anchor head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .backbone import Backbone, scatter
from .config import PipelineConfig
from .geometry import Box3D, Detection, nms_indices
from .head import DetectionHead, LossBreakdown, TargetAssignment, decode_boxes, detection_loss, make_anchors
from .nn import Module
from .paa import StackedPAA
from .pillars import PillarTensor
from .tensor import Tensor, no_grad


@dataclass
class ForwardOutput:
    cls: Tensor
    reg: Tensor
    pseudo_image: Tensor
    features: Tensor


class PiFeNet(Module):
    def __init__(self, cfg: PipelineConfig, seed: Optional[int] = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.pillar_cfg = cfg.pillar_config()
        self.encoder = StackedPAA(
            9, cfg.max_points, rng, depth=cfg.paa_depth, out_channels=cfg.pillar_channels,
            reduction=cfg.paa_reduction, toggles=cfg.toggles(), alpha_scale=cfg.theta_alpha_scale,
            beta_scale=cfg.theta_beta_scale, theta_init_std=cfg.theta_init_std)
        self.backbone = Backbone(
            cfg.pillar_channels, rng, width=cfg.bifpn_width,
            depths=(cfg.block_depth_1, cfg.block_depth_2, cfg.block_depth_3),
            use_bifpn=cfg.mini_bifpn, repeat=cfg.bifpn_repeat, eps=cfg.gate_eps,
            batch_norm=cfg.batch_norm, bn_momentum=cfg.bn_momentum)
        spec = cfg.anchor_spec()
        self.head = DetectionHead(self.backbone.out_channels, rng, spec.per_cell, prior=cfg.cls_prior)
        self.anchors = make_anchors(self.pillar_cfg, spec)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.pillar_cfg.grid_y, self.pillar_cfg.grid_x

    def encode_pillars(self, pillars: PillarTensor) -> Tensor:
        # only occupied rows carry information; padding rows are skipped
        n = max(pillars.occupied, 1)
        G = Tensor(pillars.features[:n])
        return self.encoder(G, pillars.valid[:n])

    def to_pseudo_image(self, pillar_features: Tensor, pillars: PillarTensor) -> Tensor:
        H, W = self.grid_shape
        if pillars.occupied == 0:
            return Tensor(np.zeros((H, W, pillar_features.shape[1])))
        return scatter(pillar_features, pillars.ix, pillars.iy, H, W)

    def forward(self, pillars: PillarTensor) -> ForwardOutput:
        feats = self.encode_pillars(pillars)
        img = self.to_pseudo_image(feats, pillars)
        fused = self.backbone(img)
        cls, reg = self.head(fused)
        return ForwardOutput(cls, reg, img, fused)

    __call__ = forward

    def loss(self, pillars: PillarTensor, assignment: TargetAssignment) -> LossBreakdown:
        out = self.forward(pillars)
        c = self.cfg
        return detection_loss(out.cls, out.reg, assignment, c.focal_alpha, c.focal_gamma,
                              c.reg_weight, c.smooth_l1_beta)

    def postprocess(self, cls: Tensor, reg: Tensor, score_floor: Optional[float] = None) -> list[Detection]:
        c = self.cfg
        floor = c.score_floor if score_floor is None else score_floor
        scores = ops._sigmoid(cls.data.astype(np.float64)).reshape(-1)
        cand = np.nonzero(scores >= floor)[0]
        if len(cand) == 0:
            return []
        cand = cand[np.argsort(-scores[cand], kind="stable")][: c.pre_nms_top_k]
        boxes = decode_boxes(reg.data.reshape(-1, 7)[cand], self.anchors[cand])
        keep = nms_indices(boxes, scores[cand], c.nms_iou, c.top_k)
        return [Detection(Box3D.from_array(boxes[i]), float(scores[cand][i])) for i in keep]

    def predict(self, pillars: PillarTensor, score_floor: Optional[float] = None) -> list[Detection]:
        if pillars.occupied == 0:
            return []
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward(pillars)
            return self.postprocess(out.cls, out.reg, score_floor)
        finally:
            self.train(was_training)
