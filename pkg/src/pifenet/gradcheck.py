"""Central finite-difference checks against the autodiff gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)``, maximised over elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-4,
                 indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``t``."""
    if indices is None:
        indices = list(np.ndindex(t.shape))
    out = np.zeros(len(indices))
    for k, idx in enumerate(indices):
        orig = t.data[idx]
        t.data[idx] = orig + step
        hi = fn().item()
        t.data[idx] = orig - step
        lo = fn().item()
        t.data[idx] = orig
        out[k] = (hi - lo) / (2 * step)
    return out


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-4,
                    samples: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                    floor: float = 1e-8) -> float:
    """Worst relative error between backprop and finite differences.

    ``samples`` limits the check to that many random entries per tensor.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t, a in zip(tensors, analytic):
        idx = list(np.ndindex(t.shape))
        if samples is not None and samples < len(idx):
            pick = rng.choice(len(idx), size=samples, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        num = numeric_grad(fn, t, step, idx)
        ana = np.array([a[i] for i in idx])
        worst = max(worst, rel_error(ana, num, floor))
    return worst
