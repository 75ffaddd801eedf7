"""Run configuration: TOML file -> validated, frozen dataclasses.

Every key is checked against the dataclass fields, and any problem is
reported as a :class:`ConfigFieldError` naming the dotted field path.
"""
from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .detect import LossWeights
from .heat import EXPERTS, K_MODES, HCOConfig
from .model import DetectorConfig
from .synth import SHAPES, SyntheticSceneConfig
from .tensor import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigFieldError", "ModelSection", "DataSection", "TrainSection", "EvalSection", "RunConfig",
           "load_config", "config_from_dict", "config_to_dict"]


class ConfigFieldError(ConfigError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelSection:
    depths: tuple = (1, 1, 2, 1)
    channels: tuple = (16, 32, 64, 128)
    experts: tuple = EXPERTS
    k_mode: str = "predicted"
    k_value: float = 0.6931471805599453
    t: float = 1.0
    window: int = 0
    mlp_ratio: int = 4
    dim: int = 64
    feature_stages: tuple = (1, 2, 3)
    prior_prob: float = 0.01
    anchor_size: float = 0.15
    loss_scope: str = "all"
    transform_method: str = "auto"
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    cls_weight: float = 1.0


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    resolution: tuple = (64, 64)
    bins: int = 5
    count_clip: float = 8.0
    train_size: int = 800
    eval_size: int = 200
    train_seed: int = 0
    eval_seed: int = 100_000
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 5
    classes: tuple = SHAPES
    size_range: tuple = (6.0, 12.0)
    speed_range: tuple = (0.05, 0.15)
    edge_rate: float = 2.0
    noise_rate: float = 2.0
    duration_ms: float = 50.0
    # file-backed data: lists of packed/CSV event files and matching annotation JSON files
    train_events: tuple = ()
    train_annotations: tuple = ()
    eval_events: tuple = ()
    eval_annotations: tuple = ()


@dataclass(frozen=True)
class TrainSection:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    warmup_steps: int = 100
    grad_clip: float = 1.0
    temperature_start: float = 5.0
    temperature_end: float = 0.5
    eval_every: int = 0
    log_every: int = 50


@dataclass(frozen=True)
class EvalSection:
    num_queries: int = 30
    iou_thresholds: tuple = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    score_threshold: float = 0.5
    batch_size: int = 32


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        _validate(self)

    def detector_config(self) -> DetectorConfig:
        m, d = self.model, self.data
        backbone = BackboneConfig(
            in_channels=2 * d.bins, resolution=tuple(d.resolution), depths=tuple(m.depths),
            channels=tuple(m.channels), experts=tuple(m.experts),
            hco=HCOConfig(t=m.t, k_mode=m.k_mode, k_value=m.k_value),
            window=m.window or None, mlp_ratio=m.mlp_ratio, transform_method=m.transform_method)
        return DetectorConfig(
            backbone=backbone, num_classes=d.num_classes, dim=m.dim, num_queries=self.eval.num_queries,
            feature_stages=tuple(m.feature_stages), prior_prob=m.prior_prob, anchor_size=m.anchor_size,
            loss_scope=m.loss_scope,
            loss_weights=LossWeights(l1=m.l1_weight, giou=m.giou_weight, cls=m.cls_weight))

    def scene_config(self, seed: int = 0) -> SyntheticSceneConfig:
        d = self.data
        h, w = d.resolution
        return SyntheticSceneConfig(
            height=h, width=w, min_objects=d.min_objects, max_objects=d.max_objects, classes=tuple(d.classes),
            size_range=tuple(d.size_range), speed_range=tuple(d.speed_range), edge_rate=d.edge_rate,
            noise_rate=d.noise_rate, duration_ms=d.duration_ms, seed=seed)

    def replace(self, **sections) -> "RunConfig":
        """Copy with some section fields replaced: ``cfg.replace(model={"experts": ("dct",)})``."""
        updates = {}
        for name, value in sections.items():
            current = getattr(self, name)
            updates[name] = dataclasses.replace(current, **value) if isinstance(value, dict) else value
        return dataclasses.replace(self, **updates)


def _check(cond, name, msg):
    if not cond:
        raise ConfigFieldError(name, msg)


def _validate(cfg: RunConfig) -> None:
    m, d, t, e = cfg.model, cfg.data, cfg.train, cfg.eval
    _check(cfg.precision in (32, 64), "precision", f"must be 32 or 64, got {cfg.precision}")
    _check(len(m.depths) == 4 and all(x >= 1 for x in m.depths), "model.depths", "need four positive depths")
    _check(len(m.channels) == 4 and all(x >= 1 for x in m.channels), "model.channels",
           "need four positive channel counts")
    _check(len(m.experts) >= 1 and all(x in EXPERTS for x in m.experts), "model.experts",
           f"must be a nonempty subset of {list(EXPERTS)}")
    _check(m.k_mode in K_MODES, "model.k_mode", f"must be one of {list(K_MODES)}, got {m.k_mode!r}")
    _check(m.t > 0, "model.t", "diffusion time must be positive")
    _check(m.k_value >= 0, "model.k_value", "diffusivity must be nonnegative")
    _check(m.window >= 0, "model.window", "window must be 0 (global) or a positive tile size")
    _check(m.dim >= 1, "model.dim", "must be positive")
    _check(m.loss_scope in ("all", "selected"), "model.loss_scope", "must be 'all' or 'selected'")
    _check(0 < m.prior_prob < 1, "model.prior_prob", "must lie in (0, 1)")
    _check(d.source in ("synthetic", "files"), "data.source", "must be 'synthetic' or 'files'")
    _check(len(d.resolution) == 2 and all(r > 0 and r % 32 == 0 for r in d.resolution), "data.resolution",
           "need two extents divisible by 32")
    _check(d.bins >= 1, "data.bins", "must be at least 1")
    _check(d.count_clip > 0, "data.count_clip", "must be positive")
    _check(d.train_size >= 0 and d.eval_size >= 0, "data.train_size", "dataset sizes must be nonnegative")
    _check(d.num_classes >= 1, "data.num_classes", "must be positive")
    _check(all(c in SHAPES for c in d.classes), "data.classes", f"must be drawn from {list(SHAPES)}")
    _check(t.steps >= 0, "train.steps", "must be nonnegative")
    _check(t.batch_size >= 1, "train.batch_size", "must be positive")
    _check(t.lr > 0, "train.lr", "must be positive")
    _check(t.weight_decay >= 0, "train.weight_decay", "must be nonnegative")
    _check(t.temperature_start > 0 and t.temperature_end > 0, "train.temperature_start",
           "temperatures must be positive")
    _check(t.grad_clip >= 0, "train.grad_clip", "must be nonnegative (0 disables clipping)")
    _check(e.num_queries >= 1, "eval.num_queries", "must be positive")
    _check(len(e.iou_thresholds) >= 1 and all(0 < x <= 1 for x in e.iou_thresholds), "eval.iou_thresholds",
           "need thresholds in (0, 1]")
    if d.source == "synthetic":
        try:
            cfg.scene_config()
        except ConfigError as exc:
            raise ConfigFieldError("data", str(exc)) from None
    try:
        cfg.detector_config()
    except ConfigError as exc:
        raise ConfigFieldError("model", str(exc)) from None


def _coerce(value, tp, name):
    """Convert a TOML value to the annotated field type, or raise naming the field."""
    origin = typing.get_origin(tp)
    if tp is float or tp == "float":
        _check(isinstance(value, (int, float)) and not isinstance(value, bool), name,
               f"expected a number, got {value!r}")
        return float(value)
    if tp is int or tp == "int":
        _check(isinstance(value, int) and not isinstance(value, bool), name, f"expected an integer, got {value!r}")
        return value
    if tp is str or tp == "str":
        _check(isinstance(value, str), name, f"expected a string, got {value!r}")
        return value
    if tp is tuple or tp == "tuple" or origin is tuple:
        _check(isinstance(value, (list, tuple)), name, f"expected an array, got {value!r}")
        return tuple(value)
    return value


_SECTIONS = {"model": ModelSection, "data": DataSection, "train": TrainSection, "eval": EvalSection}


def _section(cls, raw, prefix):
    _check(isinstance(raw, dict), prefix, "expected a table")
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        name = f"{prefix}.{key}"
        _check(key in hints, name, f"unknown field (known: {', '.join(sorted(hints))})")
        kwargs[key] = _coerce(value, hints[key], name)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key in ("precision", "seed"):
            kwargs[key] = _coerce(value, "int", key)
        else:
            raise ConfigFieldError(key, f"unknown field (known: {', '.join(sorted([*_SECTIONS, 'precision', 'seed']))})")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = {k: plain(x) for k, x in dataclasses.asdict(v).items()} if dataclasses.is_dataclass(v) else v
    return out
