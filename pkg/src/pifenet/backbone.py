"""Pseudo-image scatter and the three-level weighted bidirectional fusion network."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import ops
from .nn import Conv2d, ConvBlock, Module
from .tensor import Parameter, Tensor

GATE_EPS = 1e-4


def scatter(pillar_features: Tensor, ix: np.ndarray, iy: np.ndarray, height: int, width: int) -> Tensor:
    """Place ``[P, C]`` pillar features on an ``[H, W, C]`` grid; empty cells stay zero."""
    n = len(ix)
    rows = pillar_features if n == pillar_features.shape[0] else pillar_features[:n]
    return ops.scatter_rows(rows, iy, ix, height, width)


def gate_coefficients(weights: Tensor, eps: float = GATE_EPS) -> Tensor:
    """``relu(w_i) / (sum_j relu(w_j) + eps)`` for one fusion node."""
    wr = ops.relu(weights)
    return wr / (wr.sum() + eps)


def gate_blend(inputs: Sequence[Tensor], weights: Tensor, eps: float = GATE_EPS) -> Tensor:
    """Normalised weighted sum of same-shaped maps (the pre-activation, pre-conv value)."""
    if len(inputs) != weights.shape[0]:
        raise ValueError(f"{len(inputs)} inputs but {weights.shape[0]} gate weights")
    ref = inputs[0].shape
    for x in inputs[1:]:
        if x.shape != ref:
            raise ValueError(f"fusion inputs differ in shape: {x.shape} vs {ref}")
    coef = gate_coefficients(weights, eps)
    out = None
    for i, x in enumerate(inputs):
        term = coef[i] * x
        out = term if out is None else out + term
    return out


class FusionNode(Module):
    """``conv3x3(swish(blend(inputs)))`` with learnable non-negative weights."""

    def __init__(self, n_inputs: int, channels: int, rng: np.random.Generator, eps: float = GATE_EPS):
        if n_inputs not in (2, 3):
            raise ValueError("fusion nodes take 2 or 3 inputs")
        self.weights = Parameter(np.ones(n_inputs))
        self.conv = Conv2d(channels, channels, 3, rng)
        self.eps = eps

    def __call__(self, inputs: Sequence[Tensor]) -> Tensor:
        return self.conv(ops.swish(gate_blend(inputs, self.weights, self.eps)))


def fuse_gate(inputs: Sequence[Tensor], node: FusionNode) -> Tensor:
    return node(inputs)


class LevelExtractor(Module):
    """Conv blocks at strides 1, 2, 2 plus 1x1 lateral projections to a common width."""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator,
                 depths: Sequence[int] = (2, 2, 2), batch_norm: bool = True, bn_momentum: float = 0.1):
        self.stages = []
        cin = in_channels
        for level, depth in enumerate(depths):
            blocks = []
            for k in range(max(depth, 1)):
                stride = 2 if (level > 0 and k == 0) else 1
                blocks.append(ConvBlock(cin, in_channels, rng, stride=stride,
                                        batch_norm=batch_norm, bn_momentum=bn_momentum))
                cin = in_channels
            self.stages.append(blocks)
        self.laterals = [Conv2d(in_channels, width, 1, rng) for _ in depths]

    def __call__(self, img: Tensor) -> list[Tensor]:
        H, W, _ = img.shape
        if H % 4 or W % 4:
            raise ValueError(f"pseudo-image extents {H}x{W} must be divisible by 4")
        levels = []
        x = img
        for blocks, lateral in zip(self.stages, self.laterals):
            for block in blocks:
                x = block(x)
            levels.append(lateral(x))
        return levels


def extract_levels(img: Tensor, extractor: LevelExtractor) -> list[Tensor]:
    return extractor(img)


class MiniBiFPN(Module):
    """Top-down then bottom-up gated fusion over three levels, concatenated at full resolution."""

    def __init__(self, width: int, rng: np.random.Generator, repeat: int = 1, eps: float = GATE_EPS):
        self.layers = []
        for _ in range(max(repeat, 1)):
            self.layers.append([
                FusionNode(2, width, rng, eps),  # up2   <- in2, up(in3)
                FusionNode(2, width, rng, eps),  # out1  <- in1, up(up2)
                FusionNode(3, width, rng, eps),  # out2  <- in2, up2, down(out1)
                FusionNode(2, width, rng, eps),  # out3  <- in3, down(out2)
            ])

    @staticmethod
    def fuse_once(levels: Sequence[Tensor], nodes) -> list[Tensor]:
        f1, f2, f3 = levels
        up_node, out1_node, out2_node, out3_node = nodes
        up2 = up_node([f2, ops.upsample(f3)])
        out1 = out1_node([f1, ops.upsample(up2)])
        out2 = out2_node([f2, up2, ops.downsample(out1)])
        out3 = out3_node([f3, ops.downsample(out2)])
        return [out1, out2, out3]

    def __call__(self, levels: Sequence[Tensor]) -> Tensor:
        outs = list(levels)
        for nodes in self.layers:
            outs = self.fuse_once(outs, nodes)
        return ops.concat([outs[0], ops.upsample(outs[1], 1), ops.upsample(outs[2], 2)], axis=2)


class TopDownNeck(Module):
    """Baseline neck: a conv per level, upsample to full resolution, concatenate."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.convs = [Conv2d(width, width, 3, rng) for _ in range(3)]

    def __call__(self, levels: Sequence[Tensor]) -> Tensor:
        maps = [ops.upsample(ops.relu(conv(x)), i) for i, (conv, x) in enumerate(zip(self.convs, levels))]
        return ops.concat(maps, axis=2)


def mini_bifpn(levels: Sequence[Tensor], net: MiniBiFPN) -> Tensor:
    return net(levels)


class Backbone(Module):
    def __init__(self, in_channels: int, rng: np.random.Generator, width: int = 64,
                 depths: Sequence[int] = (2, 2, 2), use_bifpn: bool = True, repeat: int = 1,
                 eps: float = GATE_EPS, batch_norm: bool = True, bn_momentum: float = 0.1):
        self.extractor = LevelExtractor(in_channels, width, rng, depths, batch_norm, bn_momentum)
        self.neck = MiniBiFPN(width, rng, repeat, eps) if use_bifpn else TopDownNeck(width, rng)
        self.out_channels = 3 * width

    def __call__(self, img: Tensor) -> Tensor:
        return self.neck(self.extractor(img))
