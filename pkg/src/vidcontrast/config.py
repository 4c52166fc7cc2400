"""Training/evaluation configuration and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .data import AugmentConfig, VideoSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossWeights

MODES = ("momentum", "non_momentum")


@dataclass(frozen=True)
class TrainConfig:
    # schedule / optimiser
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.05
    warmup_epochs: int = 5
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    # objective
    temperature: float = 0.1
    lambda_intra: float = 1.0
    lambda_nn: float = 1.0
    queue_capacity: int = 512
    min_nn_pool: int = 64
    # momentum encoder
    momentum_base: float = 0.994
    momentum_schedule: str = "cosine"
    mode: str = "momentum"
    seed: int = 42
    # corpus
    n_videos: int = 320
    n_classes: int = 16
    n_frames: int = 16
    frame_size: int = 24
    clip_len: int = 4
    temporal_stride: int = 1
    crop_size: int = 16
    # encoder
    conv_channels: tuple[int, ...] = (8, 16, 32)
    conv_strides: tuple[int, ...] = (1, 2, 2)
    head_dims: tuple[int, ...] = (32, 16)
    # bookkeeping
    checkpoint_every: int = 10
    track_nn_quality: bool = True

    def __post_init__(self):
        positive = ("epochs", "batch_size", "queue_capacity", "n_videos", "n_classes", "clip_len",
                    "temporal_stride", "crop_size", "n_frames", "frame_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if not 0 <= self.sgd_momentum < 1 or self.weight_decay < 0:
            raise ConfigError("sgd_momentum must be in [0, 1) and weight_decay >= 0")
        if not 0 <= self.momentum_base <= 1:
            raise ConfigError("momentum_base must be in [0, 1]")
        if self.momentum_schedule not in ("cosine", "linear"):
            raise ConfigError(f"unknown momentum_schedule {self.momentum_schedule!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.min_nn_pool < 1:
            raise ConfigError("min_nn_pool must be >= 1")
        if self.batch_size > self.queue_capacity:
            raise ConfigError("batch_size cannot exceed queue_capacity")
        if self.batch_size > self.n_videos:
            raise ConfigError("batch_size cannot exceed n_videos")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        self.loss_weights()
        self.encoder_config()
        self.video_spec().validate()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_intra, self.lambda_nn, self.temperature)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            clip_shape=(1, self.clip_len, self.crop_size, self.crop_size),
            conv_channels=tuple(self.conv_channels),
            conv_strides=tuple(self.conv_strides),
            head_dims=tuple(self.head_dims),
        )

    def video_spec(self) -> VideoSpec:
        return VideoSpec(self.n_frames, self.frame_size, self.clip_len, self.temporal_stride, self.crop_size)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig()

    @property
    def steps_per_epoch(self) -> int:
        return self.n_videos // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


@dataclass(frozen=True)
class EvalConfig:
    test_fraction: float = 0.2
    probe_epochs: int = 200
    probe_lr: float = 1.0
    recall_ks: tuple[int, ...] = (1, 5, 10, 20)
    fewshot_fractions: tuple[float, ...] = (0.1, 0.25, 0.5)
    fewshot_seeds: tuple[int, ...] = (0, 1, 2)
    nn_quality_k: int = 5
    queue_size_for_cooccur: int = 1024
    classes_for_cooccur: int = 400

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        if self.probe_epochs < 1 or self.probe_lr <= 0:
            raise ConfigError("probe_epochs and probe_lr must be positive")
        if any(k < 1 for k in self.recall_ks):
            raise ConfigError("recall_ks must be positive")
        if any(not 0 < f <= 1 for f in self.fewshot_fractions):
            raise ConfigError("fewshot_fractions must lie in (0, 1]")


# ---------------------------------------------------------------------------
# flat text format


def _parse_value(raw: str, current: Any, name: str, line: int) -> Any:
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else int
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"line {line}: bad value {raw!r} for {name}") from None


def parse_config_text(text: str) -> tuple[TrainConfig, EvalConfig]:
    """Parse ``key = value`` lines (``#`` comments) into train and eval configs.

    Unknown keys and duplicate keys are errors.
    """
    train_defaults = TrainConfig.__dataclass_fields__
    eval_defaults = EvalConfig.__dataclass_fields__
    base_train, base_eval = TrainConfig(), EvalConfig()
    train_kw: dict[str, Any] = {}
    eval_kw: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in train_defaults:
            target, base = train_kw, base_train
        elif key in eval_defaults:
            target, base = eval_kw, base_eval
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        target[key] = _parse_value(value, getattr(base, key), key, lineno)
    return TrainConfig(**train_kw), EvalConfig(**eval_kw)


def load_config(path: str | Path | None) -> tuple[TrainConfig, EvalConfig]:
    if path is None:
        return TrainConfig(), EvalConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(*configs) -> str:
    """Render configs back into the flat text format (round-trips through the parser)."""
    lines = []
    for cfg in configs:
        for f in fields(cfg):
            lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(*configs) -> str:
    return hashlib.sha256(dump_config(*configs).encode("utf-8")).hexdigest()[:16]


def train_config_from_dict(values: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    kw = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = tuple(value) if isinstance(value, list) else value
    return TrainConfig(**kw)


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
