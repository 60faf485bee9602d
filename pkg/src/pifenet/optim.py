"""AdamW with decoupled weight decay and the one-cycle learning-rate policy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import NonFiniteError, Parameter


def adamw_step(params: Iterable[Parameter], lr: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One in-place AdamW update of every parameter.

    Decay is applied to the weights directly (``p -= lr * wd * p``) and is
    independent of the adaptive moment update.
    """
    b1, b2 = betas
    for p in params:
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or p.uid}")
        p.step += 1
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.m = b1 * p.m + (1 - b1) * g
        p.v = b2 * p.v + (1 - b2) * g * g
        m_hat = p.m / (1 - b1 ** p.step)
        v_hat = p.v / (1 - b2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    max_lr: float = 0.003
    warmup_frac: float = 0.4
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_frac * self.total_steps


def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(t: float, sched: LrSchedule) -> float:
    if not 0 <= t <= sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps}]")
    peak = sched.max_lr
    warm = sched.warmup_steps
    if t <= warm:
        return _cos_interp(peak / sched.div_factor, peak, t / warm)
    frac = (t - warm) / (sched.total_steps - warm)
    return _cos_interp(peak, peak / sched.final_div_factor, frac)
