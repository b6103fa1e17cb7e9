"""Run configuration: nested dataclasses loaded from / dumped to a YAML document.

Key names in the YAML file mirror the dataclass field names, e.g.
``loss.residual_norm`` or ``raf.modifier_points``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid configuration or shape contract violation."""


class NumericalError(RuntimeError):
    """Training diverged (NaN / inf loss)."""


VARIANTS = (
    "full",
    "camera_only",
    "end_to_end",
    "no_gates",
    "fixed_height",
    "pyramid_no_residual",
)

CLASS_NAMES = (
    "drivable_area",
    "ped_crossing",
    "walkway",
    "stop_line",
    "road_divider",
    "lane_divider",
    "vehicle",
)


@dataclass
class GridConfig:
    x_extent_m: tuple[float, float] = (-16.0, 16.0)
    z_extent_m: tuple[float, float] = (-16.0, 16.0)
    x_cells: int = 64
    z_cells: int = 64
    y_cells: int = 15
    y_res_m: float = 0.2
    y_prior_m: float = 1.0


@dataclass
class SceneConfig:
    n_cameras: int = 6
    image_size: tuple[int, int] = (128, 192)
    camera_hfov_deg: float = 72.0
    horizon_row_frac: float = 0.25
    camera_height_m: float = 1.0
    lanes: tuple[int, int] = (2, 4)
    curvature: tuple[float, float] = (-0.004, 0.004)
    vehicles: tuple[int, int] = (3, 8)
    vehicle_length_m: tuple[float, float] = (3.8, 5.0)
    vehicle_width_m: tuple[float, float] = (1.7, 2.0)
    vehicle_height_m: tuple[float, float] = (1.4, 1.8)
    crossing_density: float = 0.8
    walkway_density: float = 0.8
    stop_line_density: float = 0.7
    intersection_prob: float = 0.4
    ego_speed_mps: tuple[float, float] = (0.0, 8.0)
    sweep_dt_s: float = 0.05
    n_sweeps: int = 6
    clutter_points: int = 20
    conditions: tuple[str, ...] = ("sunny", "rainy", "night")


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    backbone_channels: tuple[int, int, int, int] = (16, 32, 48, 64)
    max_points: int = 10


@dataclass
class RafConfig:
    decoder_depth: int = 2
    heads: int = 4
    driver_points: int = 2
    modifier_points: tuple[int, int, int] = (2, 3, 4)
    self_points: int = 4
    ffn_dim: int = 64
    height_layers_m: tuple[float, float, float] = (0.0, 0.5, 1.0)
    offset_range_m: tuple[float, float] = (-0.6, 0.6)
    max_views: int = 2


@dataclass
class LossConfig:
    residual_norm: str = "smooth_l1"
    reduction: str = "spatial"
    stage_weights: tuple[float, float, float, float] = (2.0, 3.0, 4.0, 5.0)
    seg_weight: float = 10.0
    epsilon: float = 1e-5
    smooth_l1_beta: float = 1.0


@dataclass
class CodecConfig:
    kernel_size: int = 3
    lr: float = 1e-2
    steps: int = 500
    batch_size: int = 8


@dataclass
class TrainConfig:
    lr: float = 5e-3
    steps: int = 2000
    batch_size: int = 4
    eval_every: int = 200
    log_every: int = 10
    grad_clip: float = 5.0


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "full"
    eval_threshold: float = 0.5
    grid: GridConfig = field(default_factory=GridConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    raf: RafConfig = field(default_factory=RafConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.loss.residual_norm not in ("l1", "l2", "smooth_l1"):
            raise ConfigError(f"loss.residual_norm must be l1|l2|smooth_l1, got {self.loss.residual_norm!r}")
        if self.loss.reduction not in ("spatial", "channel"):
            raise ConfigError(f"loss.reduction must be spatial|channel, got {self.loss.reduction!r}")
        if self.loss.epsilon <= 0 or any(w < 0 for w in self.loss.stage_weights):
            raise ConfigError("loss weights must be non-negative and epsilon positive")
        pts = self.raf.modifier_points
        if any(b < a for a, b in zip(pts, pts[1:])):
            raise ConfigError("raf.modifier_points must be non-decreasing")
        if self.raf.decoder_depth < 1:
            raise ConfigError("raf.decoder_depth must be >= 1")
        if self.encoder.embed_dim % self.raf.heads:
            raise ConfigError("encoder.embed_dim must be divisible by raf.heads")

    @property
    def uses_stage_losses(self) -> bool:
        return self.variant != "end_to_end"

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def replace(self, **changes) -> "RunConfig":
        """Return a copy with dotted-key overrides, e.g. ``replace(**{"train.steps": 10})``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return from_dict(data)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: dict[str, Any]):
    if data is None:
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name not in _SECTIONS else None
        if name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(value, default, name)
    return cls(**kwargs)


def _coerce(value, default, name):
    # YAML 1.1 reads exponent literals without a dot (1e-3) as strings
    if isinstance(default, float) and not isinstance(value, bool) and isinstance(value, (int, str)):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{name} must be a number, got {value!r}") from None
    return value


_SECTIONS = {
    "grid": GridConfig,
    "scene": SceneConfig,
    "encoder": EncoderConfig,
    "raf": RafConfig,
    "loss": LossConfig,
    "codec": CodecConfig,
    "train": TrainConfig,
}


def from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, dict(data or {}))


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
    cfg = from_dict(data)
    return cfg.replace(**overrides) if overrides else cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
