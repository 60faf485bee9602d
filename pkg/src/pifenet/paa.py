"""Pillar Aware Attention: pooled point/channel attention and task-aware activation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class PaaToggles:
    point_attention: bool = True
    channel_attention: bool = True
    task_aware: bool = True
    pool_mean: bool = True
    pool_max: bool = True
    delta_position: str = "between"  # or "pre"

    def __post_init__(self):
        if self.delta_position not in ("between", "pre"):
            raise ValueError(f"delta_position must be 'between' or 'pre', got {self.delta_position!r}")
        if (self.point_attention or self.channel_attention) and not (self.pool_mean or self.pool_max):
            raise ValueError("attention needs at least one of pool_mean / pool_max")


def hidden_width(dim: int, reduction: int) -> int:
    return max(1, dim // reduction)


def multi_pool(G: Tensor, valid: np.ndarray):
    """Mean/max pools over points (per channel) and over channels (per point).

    Padded point rows are excluded from the point-axis pools.
    """
    c_mean = ops.reduce(G, 1, "mean", mask=valid)
    c_max = ops.reduce(G, 1, "max", mask=valid)
    p_mean = ops.reduce(G, 2, "mean")
    p_max = ops.reduce(G, 2, "max")
    return c_mean, c_max, p_mean, p_max


class AttentionBranch(Module):
    """Shared two-layer bottleneck MLP scoring one axis."""

    def __init__(self, dim: int, reduction: int, rng: np.random.Generator, delta_position: str = "between"):
        h = hidden_width(dim, reduction)
        self.w0 = Linear(dim, h, rng, bias=False)
        self.w1 = Linear(h, dim, rng, bias=False)
        self.delta_position = delta_position

    def mlp(self, x: Tensor) -> Tensor:
        if self.delta_position == "pre":
            return self.w1(self.w0(ops.relu(x)))
        return self.w1(ops.relu(self.w0(x)))

    def __call__(self, pooled_mean, pooled_max) -> Tensor:
        pre = None
        for pooled in (pooled_mean, pooled_max):
            if pooled is None:
                continue
            z = self.mlp(pooled)
            pre = z if pre is None else pre + z
        return ops.sigmoid(pre)


def attention_scores(pooled_mean, pooled_max, branch: AttentionBranch) -> Tensor:
    """``sigmoid(MLP(mean) + MLP(max))`` over the last axis; either pool may be ``None``."""
    return branch(pooled_mean, pooled_max)


def combine_attention(G: Tensor, A_p=None, A_c=None) -> Tensor:
    """Weight ``G`` by the broadcast product of point scores ``[P,N,1]`` and channel scores ``[P,1,C]``."""
    P, N, C = G.shape
    if A_p is not None and A_p.shape != (P, N, 1):
        raise ValueError(f"point scores must be {(P, N, 1)}, got {A_p.shape}")
    if A_c is not None and A_c.shape != (P, 1, C):
        raise ValueError(f"channel scores must be {(P, 1, C)}, got {A_c.shape}")
    if A_p is not None and A_c is not None:
        return ops.mul(ops.mul(A_p, A_c), G)
    scores = A_p if A_p is not None else A_c
    return G if scores is None else ops.mul(scores, G)


class TaskAware(Module):
    """Per-channel max of two affine branches with coefficients from a pooled hyper-network.

    The coefficient vector is ``[1, 0, 0, 0] + scale * tanh(z / 2)`` per channel
    where ``z`` comes from a zero-initialised final layer, so the module starts
    as an exact relu.
    """

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator,
                 alpha_scale: float = 1.0, beta_scale: float = 0.5, init_std: float = 0.0):
        self.channels = channels
        self.fc1 = Linear(channels, hidden_width(channels, reduction), rng)
        self.fc2 = Linear(hidden_width(channels, reduction), 4 * channels, rng, init="zeros", init_std=init_std)
        self.alpha_scale = alpha_scale
        self.beta_scale = beta_scale

    def coefficients(self, F: Tensor, valid: np.ndarray):
        pooled = ops.reduce(F, 1, "mean", mask=valid)
        res = ops.activation(self.fc2(ops.relu(self.fc1(pooled))), "shifted_sigmoid")
        P = F.shape[0]
        res = res.reshape(P, 1, 4, self.channels)
        a1 = 1.0 + self.alpha_scale * res[:, :, 0, :]
        b1 = self.beta_scale * res[:, :, 1, :]
        a2 = self.alpha_scale * res[:, :, 2, :]
        b2 = self.beta_scale * res[:, :, 3, :]
        return a1, b1, a2, b2

    def __call__(self, F: Tensor, valid: np.ndarray) -> Tensor:
        a1, b1, a2, b2 = self.coefficients(F, valid)
        return task_aware_apply(F, a1, b1, a2, b2)


def task_aware_apply(F: Tensor, a1, b1, a2, b2) -> Tensor:
    return ops.maximum(a1 * F + b1, a2 * F + b2)


class PAA(Module):
    """One attention module; disabled sub-modules pass features through."""

    def __init__(self, channels: int, max_points: int, rng: np.random.Generator, reduction: int = 4,
                 toggles: PaaToggles = PaaToggles(), alpha_scale: float = 1.0, beta_scale: float = 0.5,
                 theta_init_std: float = 0.0):
        self.toggles = toggles
        self.point = AttentionBranch(max_points, reduction, rng, toggles.delta_position) \
            if toggles.point_attention else None
        self.channel = AttentionBranch(channels, reduction, rng, toggles.delta_position) \
            if toggles.channel_attention else None
        self.task = TaskAware(channels, reduction, rng, alpha_scale, beta_scale, theta_init_std) \
            if toggles.task_aware else None

    def __call__(self, G: Tensor, valid: np.ndarray) -> Tensor:
        t = self.toggles
        x = G
        if self.point is not None or self.channel is not None:
            c_mean, c_max, p_mean, p_max = multi_pool(G, valid)
            A_c = A_p = None
            if self.channel is not None:
                A_c = attention_scores(c_mean if t.pool_mean else None, c_max if t.pool_max else None,
                                       self.channel)
            if self.point is not None:
                P, N, _ = G.shape
                # score the N axis: move it last, then back
                pm = p_mean.reshape(P, 1, N) if t.pool_mean else None
                px = p_max.reshape(P, 1, N) if t.pool_max else None
                A_p = attention_scores(pm, px, self.point).reshape(P, N, 1)
            x = combine_attention(x, A_p, A_c)
        if self.task is not None:
            # affine offsets would otherwise leak into padded rows
            x = self.task(x, valid) * valid.astype(x.dtype)
        return x


class StackedPAA(Module):
    """Encode decorated pillars ``[P, N, 9]`` into pillar features ``[P, out]``.

    Depth 0 is the plain baseline encoder (linear then max over points). For
    depth >= 1 the first module's output is concatenated with its input, each
    further module is added residually, and a linear layer lifts the result to
    ``out_channels`` before the point-wise max.
    """

    def __init__(self, in_channels: int, max_points: int, rng: np.random.Generator, depth: int = 2,
                 out_channels: int = 64, reduction: int = 4, toggles: PaaToggles = PaaToggles(),
                 alpha_scale: float = 1.0, beta_scale: float = 0.5, theta_init_std: float = 0.0):
        kw = dict(reduction=reduction, toggles=toggles, alpha_scale=alpha_scale,
                  beta_scale=beta_scale, theta_init_std=theta_init_std)
        self.depth = depth
        self.blocks = []
        width = in_channels
        if depth >= 1:
            self.blocks.append(PAA(in_channels, max_points, rng, **kw))
            width = 2 * in_channels
            for _ in range(depth - 1):
                self.blocks.append(PAA(width, max_points, rng, **kw))
        self.fc = Linear(width, out_channels, rng)

    def encode_points(self, G: Tensor, valid: np.ndarray) -> Tensor:
        if not self.blocks:
            return self.fc(G)
        x = ops.concat([G, self.blocks[0](G, valid)], axis=2)
        for block in self.blocks[1:]:
            x = x + block(x, valid)
        return self.fc(x)

    def __call__(self, G: Tensor, valid: np.ndarray) -> Tensor:
        y = self.encode_points(G, valid)
        P = y.shape[0]
        return ops.reduce(y, 1, "max", mask=valid).reshape(P, y.shape[2])
