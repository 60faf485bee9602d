"""Flat ``key = value`` pipeline configuration with typed keys and presets.

Lines beginning with ``#`` are comments. Unknown keys and values that do not
parse as the key's type are rejected with the offending line number. The
schema is the field list of :class:`PipelineConfig`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union

from .head import AnchorSpec
from .paa import PaaToggles
from .pillars import PillarConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # pillar grid
    x_min: float = 0.0
    x_max: float = 10.24
    y_min: float = -5.12
    y_max: float = 5.12
    z_min: float = -2.5
    z_max: float = 0.5
    pillar_x: float = 0.16
    pillar_y: float = 0.16
    max_pillars: int = 4096
    max_points: int = 16
    # pillar aware attention
    paa_depth: int = 2
    paa_reduction: int = 4
    point_attention: bool = True
    channel_attention: bool = True
    task_aware: bool = True
    pool_mean: bool = True
    pool_max: bool = True
    delta_position: str = "between"
    theta_alpha_scale: float = 1.0
    theta_beta_scale: float = 0.5
    theta_init_std: float = 0.0
    pillar_channels: int = 64
    # backbone
    mini_bifpn: bool = True
    bifpn_width: int = 64
    bifpn_repeat: int = 1
    block_depth_1: int = 2
    block_depth_2: int = 2
    block_depth_3: int = 2
    gate_eps: float = 1e-4
    batch_norm: bool = True
    bn_momentum: float = 0.1
    # head and losses
    anchor_w: float = 0.6
    anchor_l: float = 0.8
    anchor_h: float = 1.73
    pos_iou: float = 0.5
    neg_iou: float = 0.35
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 2.0
    smooth_l1_beta: float = 0.0
    cls_prior: float = 0.01
    # post-processing
    score_floor: float = 0.3
    nms_iou: float = 0.5
    top_k: int = 300
    pre_nms_top_k: int = 1000
    # training
    epochs: int = 500
    batch_size: int = 1
    max_lr: float = 0.003
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.4
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    augment: bool = False
    # evaluation
    eval_iou: float = 0.5
    # synthetic scenes
    num_scenes: int = 8
    min_pedestrians: int = 2
    max_pedestrians: int = 4
    ground_points: int = 1500
    poles: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.pillar_config()
            self.toggles()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.batch_size < 1 or self.batch_size > 4:
            raise ConfigError("batch_size must be between 1 and 4")
        if self.paa_depth < 0:
            raise ConfigError("paa_depth must be >= 0")
        if self.gate_eps < 0:
            raise ConfigError("gate_eps must be >= 0")
        if self.neg_iou > self.pos_iou:
            raise ConfigError("neg_iou must not exceed pos_iou")

    def pillar_config(self) -> PillarConfig:
        return PillarConfig(self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max,
                            self.pillar_x, self.pillar_y, self.max_pillars, self.max_points)

    def toggles(self) -> PaaToggles:
        return PaaToggles(self.point_attention, self.channel_attention, self.task_aware,
                          self.pool_mean, self.pool_max, self.delta_position)

    def anchor_spec(self) -> AnchorSpec:
        return AnchorSpec(self.anchor_w, self.anchor_l, self.anchor_h)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = [f"# pifenet config, schema {SCHEMA_VERSION}"]
        lines += [f"{k} = {_format(v)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        clean = {}
        for k, v in values.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            clean[k] = _coerce(k, v, types[k])
        return base.replace(**clean)

    @classmethod
    def loads(cls, text: str, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            try:
                values[key] = _coerce(key, value, types[key])
            except ConfigError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        return cls.from_dict(values, base)

    @classmethod
    def load(cls, path: Union[str, Path], base: "PipelineConfig | None" = None) -> "PipelineConfig":
        return cls.loads(Path(path).read_text(), base)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, value, typ: str):
    if typ == "bool":
        if isinstance(value, bool):
            return value
        s = str(value).lower()
        if s in ("true", "1", "yes", "on"):
            return True
        if s in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if typ == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if typ == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {typ}, got {value!r}") from None
    return str(value)


PRESETS = {
    "toy": {},
    "kitti-ped": {
        "x_min": 0.0, "x_max": 47.36, "y_min": -19.84, "y_max": 19.84, "z_min": -2.5, "z_max": 0.5,
        "pillar_x": 0.16, "pillar_y": 0.16, "max_pillars": 12000, "max_points": 32,
        "epochs": 150, "augment": True,
    },
}


def preset(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PipelineConfig.from_dict(PRESETS[name])
