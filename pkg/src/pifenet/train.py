"""Toy training loop, checkpoints, inference and stage benchmarking."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .config import PipelineConfig
from .data import AugmentRanges, SyntheticScene, augment_scene
from .geometry import Detection
from .head import TargetAssignment, assign_targets
from .model import PiFeNet
from .optim import LrSchedule, adamw_step, one_cycle_lr
from .pillars import PillarTensor, PointCloud, crop_to_range, pillarize
from .tensor import NonFiniteError, no_grad, zero_grad

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


def prepare(cfg: PipelineConfig, model: PiFeNet, cloud: PointCloud, boxes: np.ndarray,
            seed: int) -> tuple[PillarTensor, TargetAssignment]:
    pc = cfg.pillar_config()
    pillars = pillarize(crop_to_range(cloud, pc), pc, seed=seed)
    assignment = assign_targets(model.anchors, boxes, cfg.pos_iou, cfg.neg_iou)
    return pillars, assignment


@dataclass
class TrainResult:
    model: PiFeNet
    trace: list[dict] = field(default_factory=list)  # one row per epoch
    seconds: float = 0.0

    @property
    def first_loss(self) -> float:
        return self.trace[0]["total"]

    @property
    def final_loss(self) -> float:
        return self.trace[-1]["total"]


def train_toy(cfg: PipelineConfig, scenes: Sequence[SyntheticScene], model: Optional[PiFeNet] = None,
              log_every: int = 0) -> TrainResult:
    """Full forward/backward per scene with AdamW under a one-cycle schedule.

    The trace holds the mean loss over the scenes of each epoch. Raises
    :class:`DivergenceError` on the first non-finite loss.
    """
    if not scenes:
        raise ValueError("train_toy needs at least one scene")
    model = model or PiFeNet(cfg)
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    cached = None if cfg.augment else [prepare(cfg, model, s.cloud, s.boxes, cfg.seed) for s in scenes]
    steps_per_epoch = -(-len(scenes) // cfg.batch_size)
    sched = LrSchedule(cfg.epochs * steps_per_epoch, cfg.max_lr, cfg.warmup_frac, cfg.div_factor,
                       cfg.final_div_factor)
    step = 0
    start = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        sums = {"total": 0.0, "cls": 0.0, "reg": 0.0}
        for b in range(0, len(order), cfg.batch_size):
            batch = order[b:b + cfg.batch_size]
            zero_grad(params)
            for i in batch:
                if cached is not None:
                    pillars, assignment = cached[i]
                else:
                    s = scenes[i]
                    aug_seed = int(rng.integers(2**31 - 1))
                    cloud, boxes = augment_scene(s.cloud, s.boxes, aug_seed, AugmentRanges())
                    pillars, assignment = prepare(cfg, model, cloud, boxes, cfg.seed)
                try:
                    losses = model.loss(pillars, assignment)
                    loss = losses.total / float(len(batch)) if len(batch) > 1 else losses.total
                    loss.backward()
                except NonFiniteError as exc:
                    raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch + 1}): {exc}") from exc
                for k, v in losses.values().items():
                    if k in sums:
                        sums[k] += v
            lr = one_cycle_lr(step, sched)
            try:
                adamw_step(params, lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps, cfg.weight_decay)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite gradient at step {step}: {exc}") from exc
            step += 1
        row = {"epoch": epoch + 1, "lr": lr, **{k: v / len(scenes) for k, v in sums.items()}}
        result.trace.append(row)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.4f (cls %.4f reg %.4f) lr %.2e", row["epoch"], row["total"],
                        row["cls"], row["reg"], lr)
    result.seconds = time.perf_counter() - start
    model.eval()
    return result


# --- checkpoints ---------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: PiFeNet) -> None:
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    arrays.update({f"buffer/{name}": v for name, v in model.buffers().items()})
    arrays["meta"] = np.array(json.dumps({"format_version": CHECKPOINT_VERSION,
                                          "config": model.cfg.to_dict()}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: Union[str, Path], cfg: Optional[PipelineConfig] = None) -> PiFeNet:
    """Rebuild a model from a checkpoint; ``cfg`` (if given) must match the stored config."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        stored = PipelineConfig.from_dict(meta["config"])
        if cfg is not None:
            diff = {k for k, v in cfg.to_dict().items() if k not in _RUNTIME_KEYS and stored.to_dict()[k] != v}
            if diff:
                raise ConfigMismatch(f"checkpoint config differs on {sorted(diff)}")
            stored = cfg
        model = PiFeNet(stored)
        for name, p in model.named_parameters():
            p.data = np.array(z[f"param/{name}"], dtype=p.data.dtype)
        model.load_buffers({k[len("buffer/"):]: z[k] for k in z.files if k.startswith("buffer/")})
    model.eval()
    return model


# keys that only affect post-processing or training, not the network
_RUNTIME_KEYS = {"score_floor", "nms_iou", "top_k", "pre_nms_top_k", "epochs", "batch_size", "max_lr",
                 "weight_decay", "adam_beta1", "adam_beta2", "adam_eps", "warmup_frac", "div_factor",
                 "final_div_factor", "augment", "eval_iou", "num_scenes", "min_pedestrians",
                 "max_pedestrians", "ground_points", "poles", "seed"}


# --- inference and benchmarking ---------------------------------------------

def infer(model: PiFeNet, clouds: Sequence[PointCloud], score_floor: Optional[float] = None,
          seed: int = 0) -> list[list[Detection]]:
    pc = model.cfg.pillar_config()
    return [model.predict(pillarize(crop_to_range(c, pc), pc, seed=seed), score_floor) for c in clouds]


STAGES = ("pre-processing", "PAA", "scatter", "Mini-BiFPN", "post-processing")
# per-stage latency on a V100 as published, ms; reference only
REFERENCE_MS = {"pre-processing": 5.84, "PAA": 18.12, "scatter": 0.60, "Mini-BiFPN": 13.26,
                "post-processing": 1.34, "end-to-end": 39.16}


def timed_forward(model: PiFeNet, cloud: PointCloud, seed: int = 0) -> tuple[dict[str, float], list[Detection]]:
    pc = model.cfg.pillar_config()
    t = [time.perf_counter()]
    pillars = pillarize(crop_to_range(cloud, pc), pc, seed=seed)
    t.append(time.perf_counter())
    feats = model.encode_pillars(pillars)
    t.append(time.perf_counter())
    img = model.to_pseudo_image(feats, pillars)
    t.append(time.perf_counter())
    cls, reg = model.head(model.backbone(img))
    t.append(time.perf_counter())
    dets = model.postprocess(cls, reg) if pillars.occupied else []
    t.append(time.perf_counter())
    stages = {name: t[i + 1] - t[i] for i, name in enumerate(STAGES)}
    stages["end-to-end"] = t[-1] - t[0]
    return stages, dets


def bench(model: PiFeNet, clouds: Sequence[PointCloud], warmup: int = 10, iterations: int = 50) -> dict:
    """Per-stage wall-time statistics in milliseconds."""
    if warmup < 10 or iterations < 50:
        raise ValueError("bench needs >= 10 warmup and >= 50 timed iterations")
    model.eval()
    samples: dict[str, list[float]] = {k: [] for k in (*STAGES, "end-to-end")}
    with no_grad():
        for i in range(warmup + iterations):
            t0 = time.perf_counter()
            stages, _ = timed_forward(model, clouds[i % len(clouds)])
            stages["end-to-end"] = time.perf_counter() - t0  # measured outside the stage clock
            if i >= warmup:
                for k, v in stages.items():
                    samples[k].append(v * 1e3)
    rows = []
    for k, v in samples.items():
        arr = np.array(v)
        rows.append({"stage": k, "mean_ms": float(arr.mean()), "median_ms": float(np.median(arr)),
                     "p95_ms": float(np.percentile(arr, 95)), "reference_ms": REFERENCE_MS[k]})
    stage_sum = sum(r["mean_ms"] for r in rows if r["stage"] in STAGES)
    e2e = next(r["mean_ms"] for r in rows if r["stage"] == "end-to-end")
    return {"schema": "pifenet.bench/1", "warmup": warmup, "iterations": iterations, "stages": rows,
            "stage_sum_ms": stage_sum, "end_to_end_ms": e2e,
            "accounting_error": abs(stage_sum - e2e) / e2e}
