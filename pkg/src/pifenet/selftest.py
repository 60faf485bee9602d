"""Built-in verification suite behind the ``selftest`` command."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .backbone import gate_blend, gate_coefficients
from .config import PipelineConfig
from .evaluation import Frame, ap40
from .geometry import Box3D, Detection, bev_iou, nms_bruteforce, nms_indices
from .gradcheck import check_gradients
from .oracles import brute_force_ap40, monte_carlo_iou
from .paa import TaskAware
from .tensor import Parameter, Tensor, precision


def spread(rng: np.random.Generator, shape, low: float = -2.0, high: float = 2.0) -> np.ndarray:
    """Random values whose pairwise gaps stay well above a finite-difference step.

    Keeps max/relu kinks out of reach of the perturbation.
    """
    n = int(np.prod(shape))
    base = (rng.permutation(n) + 0.5) / n
    vals = low + (high - low) * (base + rng.uniform(-0.2, 0.2, n) / n)
    vals[np.abs(vals) < 1e-2] += 0.05
    return vals.reshape(shape)


def _weighted(out_fn, shape, rng):
    r = rng.normal(size=shape)
    return lambda: (out_fn() * r).sum()


def _case_binary(kind):
    def build(rng):
        a = Tensor(spread(rng, (3, 1, 4)), requires_grad=True)
        b = Tensor(spread(rng, (1, 2, 4)), requires_grad=True)
        f = {"add": ops.add, "mul": ops.mul, "max": ops.maximum, "sub": ops.sub}[kind]
        return _weighted(lambda: f(a, b), (3, 2, 4), rng), [a, b]
    return build


def _case_div(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    return _weighted(lambda: a / b, (3, 4), rng), [a, b]


def _case_linear(rng):
    x = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    w = Parameter(rng.normal(size=(5, 4)))
    b = Parameter(rng.normal(size=4))
    return _weighted(lambda: ops.linear(x, w, b), (2, 3, 4), rng), [x, w, b]


def _case_conv(stride, padding, k=3):
    def build(rng):
        x = Tensor(rng.normal(size=(5, 5, 2)), requires_grad=True)
        kern = Parameter(rng.normal(size=(k, k, 2, 3)))
        b = Parameter(rng.normal(size=3))
        shape = ops.conv2d(x, kern, b, stride, padding).shape
        return _weighted(lambda: ops.conv2d(x, kern, b, stride, padding), shape, rng), [x, kern, b]
    return build


def _case_reduce(kind, axis, masked):
    def build(rng):
        x = Tensor(spread(rng, (3, 4, 5)), requires_grad=True)
        mask = (np.arange(4)[None, :, None] < np.array([4, 2, 1])[:, None, None]) if masked else None
        shape = ops.reduce(x, axis, kind, mask).shape
        return _weighted(lambda: ops.reduce(x, axis, kind, mask), shape, rng), [x]
    return build


def _case_activation(kind):
    def build(rng):
        x = Tensor(spread(rng, (4, 6), -4, 4), requires_grad=True)
        return _weighted(lambda: ops.activation(x, kind), (4, 6), rng), [x]
    return build


def _case_resample(direction):
    def build(rng):
        x = Tensor(spread(rng, (4, 6, 2)), requires_grad=True)
        shape = ops.resample2x(x, direction).shape
        return _weighted(lambda: ops.resample2x(x, direction), shape, rng), [x]
    return build


def _case_concat(rng):
    a = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    return _weighted(lambda: ops.concat([a, b], axis=2), (2, 3, 6), rng), [a, b]


def _case_scatter(rng):
    rows = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    iy, ix = np.array([0, 2, 3]), np.array([1, 1, 0])
    return _weighted(lambda: ops.scatter_rows(rows, iy, ix, 4, 3), (4, 3, 4), rng), [rows]


def _case_batch_norm(frozen):
    def build(rng):
        x = Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True)
        g = Parameter(rng.uniform(0.5, 1.5, size=5))
        b = Parameter(rng.normal(size=5))
        stats = (rng.normal(size=5), rng.uniform(0.5, 2, size=5)) if frozen else None
        return _weighted(lambda: ops.batch_norm(x, g, b, 1e-3, stats)[0], (4, 3, 5), rng), [x, g, b]
    return build


def _case_focal(rng):
    x = Tensor(rng.normal(size=(12, 1)) * 2, requires_grad=True)
    t = (rng.random((12, 1)) < 0.3).astype(float)
    w = (rng.random((12, 1)) < 0.9).astype(float)
    return (lambda: ops.sigmoid_focal_loss(x, t, w, 0.25, 2.0)), [x]


def _case_l1(rng):
    x = Tensor(rng.normal(size=(6, 7)), requires_grad=True)
    target = x.data + spread(rng, (6, 7), 0.1, 1.0) * rng.choice([-1, 1], size=(6, 7))
    w = (rng.random(6) < 0.7).astype(float)
    return (lambda: ops.l1_loss(x, target, w)), [x]


def _case_index(rng):
    x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    return _weighted(lambda: x.reshape(3, 2, 4)[:, 1, :], (3, 4), rng), [x]


GRADIENT_CASES: dict[str, Callable] = {
    "add": _case_binary("add"),
    "mul": _case_binary("mul"),
    "max": _case_binary("max"),
    "sub": _case_binary("sub"),
    "div": _case_div,
    "linear": _case_linear,
    "conv2d_same_s1": _case_conv(1, "same"),
    "conv2d_same_s2": _case_conv(2, "same"),
    "conv2d_valid": _case_conv(1, "valid"),
    "conv2d_1x1_s2": _case_conv(2, "same", k=1),
    "reduce_mean": _case_reduce("mean", 1, False),
    "reduce_max": _case_reduce("max", 2, False),
    "reduce_mean_masked": _case_reduce("mean", 1, True),
    "reduce_max_masked": _case_reduce("max", 1, True),
    "relu": _case_activation("relu"),
    "sigmoid": _case_activation("sigmoid"),
    "swish": _case_activation("swish"),
    "shifted_sigmoid": _case_activation("shifted_sigmoid"),
    "upsample": _case_resample("up"),
    "downsample": _case_resample("down"),
    "concat": _case_concat,
    "scatter": _case_scatter,
    "batch_norm": _case_batch_norm(False),
    "batch_norm_frozen": _case_batch_norm(True),
    "focal_loss": _case_focal,
    "l1_loss": _case_l1,
    "index": _case_index,
}


def gradient_error(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        fn, tensors = GRADIENT_CASES[name](rng)
        return check_gradients(fn, tensors, step=1e-4, floor=1e-6)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_gradient_suite(instances: int = 3) -> CheckResult:
    worst, where = 0.0, ""
    for name in GRADIENT_CASES:
        for seed in range(instances):
            err = gradient_error(name, seed)
            if err > worst:
                worst, where = err, f"{name}#{seed}"
    return CheckResult("gradients", worst < 1e-4, f"worst rel. err {worst:.2e} ({where})")


def check_relu_identity(cfg: PipelineConfig, trials: int = 200) -> CheckResult:
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    for _ in range(trials):
        C = int(rng.integers(1, 20))
        N = int(rng.integers(1, 8))
        P = int(rng.integers(1, 5))
        ta = TaskAware(C, cfg.paa_reduction, rng, cfg.theta_alpha_scale, cfg.theta_beta_scale,
                       cfg.theta_init_std)
        F = Tensor(rng.normal(size=(P, N, C)) * 3)
        valid = np.ones((P, N, 1), dtype=bool)
        out = ta(F, valid).data
        worst = max(worst, float(np.max(np.abs(out - np.maximum(F.data, 0)))))
    return CheckResult("task-aware relu at init", worst == 0.0, f"max deviation {worst:.3g}")


def check_gate_normalization(cfg: PipelineConfig) -> CheckResult:
    rng = np.random.default_rng(cfg.seed)
    eps = cfg.gate_eps
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 4))
        w = rng.uniform(0.01, 5.0, n)
        coef = gate_coefficients(Tensor(w, dtype=np.float64), eps).data
        worst = max(worst, abs(coef.sum() - w.sum() / (w.sum() + eps)))
    blend = gate_blend([Tensor(np.full((2, 2, 1), 2.0)), Tensor(np.full((2, 2, 1), 4.0))],
                       Tensor(np.ones(2), dtype=np.float64), eps).data
    mean_err = float(np.max(np.abs(blend - 3.0)))
    ok = worst < 1e-6 and mean_err < 1e-3
    return CheckResult("fusion gate normalization", ok,
                       f"coef-sum err {worst:.2e}, equal-weight mean err {mean_err:.2e} (eps={eps})")


def check_iou(samples: int = 250_000) -> CheckResult:
    closed = abs(bev_iou([0, 0, 0, 1, 1, 1, 0], [0.5, 0, 0, 1, 1, 1, 0]) - 1 / 3)
    a = [0, 0, 0, 1, 1, 1, 0]
    b = [0, 0, 0, 1, 1, 1, math.pi / 4]
    mc = abs(bev_iou(a, b) - monte_carlo_iou(a, b, samples))
    return CheckResult("rotated IoU", bool(closed < 1e-9 and mc < 2e-3),
                       f"closed-form err {closed:.1e}, monte-carlo err {mc:.1e}")


def random_frames(rng: np.random.Generator, n_frames: int = 3, max_gt: int = 5, max_det: int = 8):
    frames = []
    for _ in range(n_frames):
        n_gt = int(rng.integers(0, max_gt + 1))
        gts = [Box3D(rng.uniform(0, 10), rng.uniform(-5, 5), -1.0, 0.6, 0.8, 1.7, rng.uniform(-3, 3))
               for _ in range(n_gt)]
        dets = []
        for _ in range(int(rng.integers(0, max_det + 1))):
            if gts and rng.random() < 0.6:
                g = gts[int(rng.integers(len(gts)))]
                box = Box3D(g.cx + rng.normal(0, 0.15), g.cy + rng.normal(0, 0.15), g.cz, g.w, g.l, g.h, g.theta)
            else:
                box = Box3D(rng.uniform(0, 10), rng.uniform(-5, 5), -1.0, 0.6, 0.8, 1.7, rng.uniform(-3, 3))
            score = float(np.round(rng.random(), 1))  # coarse scores force ties
            dets.append(Detection(box, score))
        considered = rng.random(n_gt) < 0.85
        frames.append((dets, gts, considered))
    return frames


def check_ap_oracle(cases: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        raw = random_frames(rng)
        fast = ap40([Frame(d, g, c) for d, g, c in raw], 0.5, "bev").ap
        ref = brute_force_ap40([([(x.box, x.score) for x in d], g, c) for d, g, c in raw], bev_iou, 0.5)
        if fast is None:
            if not math.isnan(ref):
                worst = math.inf
            continue
        worst = max(worst, abs(fast - ref))
    return CheckResult("AP40 oracle", worst < 1e-9, f"max |AP - oracle| {worst:.1e}")


def check_nms(cases: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(cases):
        boxes, scores = random_nms_input(rng)
        if nms_indices(boxes, scores, 0.3) != nms_bruteforce(boxes, scores, 0.3):
            mismatches += 1
    return CheckResult("NMS equivalence", mismatches == 0, f"{mismatches} mismatching keep sets")


def random_nms_input(rng: np.random.Generator, n: int = 30):
    centers = rng.uniform(0, 4, size=(n, 2))
    boxes = np.c_[centers, np.full(n, -1.0), rng.uniform(0.4, 0.9, n), rng.uniform(0.5, 1.2, n),
                  np.full(n, 1.7), rng.uniform(-math.pi, math.pi, n)]
    return boxes, np.round(rng.random(n), 2)


def run_selftest(cfg: PipelineConfig) -> list[CheckResult]:
    return [
        check_gradient_suite(),
        check_relu_identity(cfg),
        check_gate_normalization(cfg),
        check_iou(),
        check_ap_oracle(),
        check_nms(),
    ]
