"""Differentiable operations over :class:`~pifenet.tensor.Tensor`.

Feature maps are channel-last ``[H, W, C]`` arrays with rows indexed by y.
Max-style reductions break ties toward the first index so gradients are
deterministic.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}") from None


def elementwise_binary(a, b, kind: str) -> Tensor:
    """Broadcasting ``add``, ``mul`` or ``max`` of two tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if kind == "add":
        out = a.data + b.data

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif kind == "mul":
        out = a.data * b.data

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    elif kind == "max":
        out = np.maximum(a.data, b.data)
        first = a.data >= b.data

        def backward(g):
            return (_unbroadcast(np.where(first, g, 0), a.shape),
                    _unbroadcast(np.where(first, 0, g), b.shape))
    else:
        raise ValueError(f"unknown binary kind {kind!r}")
    return Tensor.from_op(out, kind, (a, b), backward)


def add(a, b) -> Tensor:
    return elementwise_binary(a, b, "add")


def mul(a, b) -> Tensor:
    return elementwise_binary(a, b, "mul")


def maximum(a, b) -> Tensor:
    return elementwise_binary(a, b, "max")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, "sub", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return Tensor.from_op(out, "div", (a, b), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return Tensor.from_op(out, "sum", (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor.from_op(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.array(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return Tensor.from_op(out, "index", (x,), backward)


def reduce(x: Tensor, axis: int, kind: str, mask: Optional[np.ndarray] = None) -> Tensor:
    """Collapse ``axis`` to extent 1 by ``mean`` or ``max``.

    ``mask`` (broadcastable to ``x``) marks valid entries. Masked-out entries
    are excluded from both the mean denominator and the max; a slice with no
    valid entry reduces to 0 and receives no gradient.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    axis %= x.ndim
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if kind == "mean":
        if mask is None:
            n = x.shape[axis]
            out = x.data.mean(axis=axis, keepdims=True)

            def backward(g):
                return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)
        else:
            w = mask.astype(x.dtype)
            count = np.maximum(w.sum(axis=axis, keepdims=True), 1)
            out = (x.data * w).sum(axis=axis, keepdims=True) / count

            def backward(g):
                return (g / count * w,)
    elif kind == "max":
        if mask is None:
            arg = x.data.argmax(axis=axis)
            out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
            empty = None
        else:
            filled = np.where(mask, x.data, -np.inf)
            arg = filled.argmax(axis=axis)
            out = np.take_along_axis(filled, np.expand_dims(arg, axis), axis=axis)
            empty = ~mask.any(axis=axis, keepdims=True)
            out = np.where(empty, 0, out).astype(x.dtype)
        arg_k = np.expand_dims(arg, axis)

        def backward(g):
            full = np.zeros_like(x.data)
            gg = g if empty is None else np.where(empty, 0, g)
            np.put_along_axis(full, arg_k, gg, axis=axis)
            return (full,)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return Tensor.from_op(np.ascontiguousarray(out), f"reduce_{kind}", (x,), backward)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[K, M]``."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor.from_op(out, "linear", parents, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x: Tensor, kind: str) -> Tensor:
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0)

        def backward(g):
            return (g * (d > 0),)
    elif kind == "sigmoid":
        out = _sigmoid(d)

        def backward(g):
            return (g * out * (1 - out),)
    elif kind == "swish":
        s = _sigmoid(d)
        out = d * s

        def backward(g):
            return (g * (s + d * s * (1 - s)),)
    elif kind == "shifted_sigmoid":
        # 2*sigmoid(x) - 1 == tanh(x / 2)
        out = np.tanh(0.5 * d)

        def backward(g):
            return (g * 0.5 * (1 - out * out),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return Tensor.from_op(out.astype(d.dtype, copy=False), kind, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def swish(x: Tensor) -> Tensor:
    return activation(x, "swish")


def _same_pad(extent: int, k: int, stride: int) -> tuple[int, int, int]:
    # k // 2 on both sides; for odd k this yields ceil(extent / stride)
    pad = k // 2
    return (extent + 2 * pad - k) // stride + 1, pad, pad


def conv2d(x: Tensor, k: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of ``[H, W, Cin]`` with ``[kh, kw, Cin, Cout]``."""
    H, W, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if kcin != cin:
        raise ValueError(f"conv2d: input channels {cin} != kernel channels {kcin}")
    if padding == "same":
        ho, pt, pb = _same_pad(H, kh, stride)
        wo, pl, pr = _same_pad(W, kw, stride)
    elif padding == "valid":
        if kh > H or kw > W:
            raise ValueError("conv2d: kernel larger than input under 'valid' padding")
        ho, wo = (H - kh) // stride + 1, (W - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")

    if kh == 1 and kw == 1:
        xs = x.data[::stride, ::stride] if stride > 1 else x.data
        cols = xs.reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride][:ho, :wo]
        # win: [ho, wo, cin, kh, kw] -> cols ordered (kh, kw, cin)
        cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    if b is not None:
        out += b.data
    out = out.reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(k.shape)
        gcols = g2 @ kmat.T
        if kh == 1 and kw == 1:
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[::stride, ::stride] = gcols.reshape(ho, wo, cin)
            else:
                gx = gcols.reshape(x.shape)
        else:
            gc = gcols.reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros((H + pt + pb, W + pl + pr, cin), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gc[:, :, i, j]
            gx = gxp[pt:pt + H, pl:pl + W]
        grads = [gx, gk]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, k, b) if b is not None else (x, k)
    return Tensor.from_op(out, "conv2d", parents, backward)


def resample2x(x: Tensor, direction: str) -> Tensor:
    """Nearest 2x upsample or 2x2/stride-2 max-pool of a ``[H, W, C]`` map."""
    H, W, C = x.shape
    if direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

        def backward(g):
            return (g.reshape(H, 2, W, 2, C).sum(axis=(1, 3)),)
    elif direction == "down":
        if H % 2 or W % 2:
            raise ValueError(f"downsample needs even extents, got {H}x{W}")
        blocks = x.data.reshape(H // 2, 2, W // 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H // 2, W // 2, 4, C)
        arg = blocks.argmax(axis=2)
        out = np.take_along_axis(blocks, arg[:, :, None], axis=2)[:, :, 0]

        def backward(g):
            gb = np.zeros_like(blocks)
            np.put_along_axis(gb, arg[:, :, None], g[:, :, None], axis=2)
            return (gb.reshape(H // 2, W // 2, 2, 2, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C),)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return Tensor.from_op(np.ascontiguousarray(out), f"resample_{direction}", (x,), backward)


def upsample(x: Tensor, times: int = 1) -> Tensor:
    for _ in range(times):
        x = resample2x(x, "up")
    return x


def downsample(x: Tensor) -> Tensor:
    return resample2x(x, "down")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis %= len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat: shape mismatch {t.shape} vs {ref} off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, splits, axis=axis)

    return Tensor.from_op(out, "concat", tensors, backward)


def scatter_rows(rows: Tensor, iy: np.ndarray, ix: np.ndarray, height: int, width: int) -> Tensor:
    """Place ``rows[j]`` at grid cell ``(iy[j], ix[j])`` of a zero ``[H, W, C]`` map."""
    n, C = rows.shape
    iy = np.asarray(iy, dtype=np.int64)
    ix = np.asarray(ix, dtype=np.int64)
    if len(iy) != n or len(ix) != n:
        raise ValueError("scatter: one coordinate per row required")
    if n and (iy.min() < 0 or ix.min() < 0 or iy.max() >= height or ix.max() >= width):
        raise ValueError("scatter: coordinates outside the grid")
    flat = iy * width + ix
    if len(np.unique(flat)) != n:
        raise ValueError("scatter: duplicate pillar coordinates")
    out = np.zeros((height, width, C), dtype=rows.dtype)
    out[iy, ix] = rows.data

    def backward(g):
        return (g[iy, ix],)

    return Tensor.from_op(out, "scatter", (rows,), backward)


def gather_rows(img: Tensor, iy: np.ndarray, ix: np.ndarray) -> Tensor:
    iy = np.asarray(iy, dtype=np.int64)
    ix = np.asarray(ix, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(img.data)
        np.add.at(full, (iy, ix), g)
        return (full,)

    return Tensor.from_op(img.data[iy, ix], "gather", (img,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               stats: Optional[tuple[np.ndarray, np.ndarray]] = None):
    """Per-channel normalize-and-affine over all leading axes.

    With ``stats=None`` the batch statistics are used (and returned so the
    caller can update running averages); otherwise ``stats`` are treated as
    frozen constants.
    """
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    if stats is None:
        mean = x2.mean(axis=0)
        var = x2.var(axis=0)
    else:
        mean, var = stats
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x2 - mean) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape).astype(x.dtype, copy=False)
    n = x2.shape[0]
    frozen = stats is not None

    def backward(g):
        g2 = g.reshape(-1, C)
        ggamma = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gxhat = g2 * gamma.data
        if frozen:
            gx = gxhat * inv
        else:
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return gx.reshape(x.shape).astype(x.dtype, copy=False), ggamma, gbeta

    return Tensor.from_op(out, "batch_norm", (x, gamma, beta), backward), (mean, var)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0, -x)


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray,
                       alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss; ``weights`` zeroes ignored entries."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    w = np.asarray(weights, dtype=x.dtype)
    p = _sigmoid(x)
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    pos = -alpha * (1 - p) ** gamma * log_p
    neg = -(1 - alpha) * p ** gamma * log_q
    per = w * (t * pos + (1 - t) * neg)
    out = np.asarray(per.sum(), dtype=x.dtype)

    def backward(g):
        dpos = alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
        dneg = (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log_q)
        return (g * w * (t * dpos + (1 - t) * dneg),)

    return Tensor.from_op(out, "focal_loss", (logits,), backward)


def l1_loss(pred: Tensor, target: np.ndarray, weights: np.ndarray, smooth_beta: float = 0.0) -> Tensor:
    """Summed (optionally smooth) L1 over rows weighted by ``weights[:, None]``."""
    diff = pred.data - np.asarray(target, dtype=pred.dtype)
    w = np.asarray(weights, dtype=pred.dtype).reshape(-1, *([1] * (pred.ndim - 1)))
    ad = np.abs(diff)
    if smooth_beta > 0:
        per = np.where(ad < smooth_beta, 0.5 * diff * diff / smooth_beta, ad - 0.5 * smooth_beta)
        dper = np.where(ad < smooth_beta, diff / smooth_beta, np.sign(diff))
    else:
        per = ad
        dper = np.sign(diff)
    out = np.asarray((w * per).sum(), dtype=pred.dtype)
    return Tensor.from_op(out, "l1_loss", (pred,), lambda g: (g * w * dper,))
