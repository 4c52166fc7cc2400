"""Toy spatiotemporal encoder, projection heads and the momentum twin."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

BRANCHES = ("intra", "nn")
SIDES = ("query", "key")


@dataclass(frozen=True)
class EncoderConfig:
    clip_shape: tuple[int, int, int, int] = (1, 4, 16, 16)
    conv_channels: tuple[int, ...] = (8, 16, 32)
    conv_strides: tuple[int, ...] = (1, 2, 2)
    kernel_size: int = 3
    head_dims: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        if len(self.conv_channels) != len(self.conv_strides) or not self.conv_channels:
            raise ConfigError("conv_channels and conv_strides must be non-empty and equally long")
        if not self.head_dims:
            raise ConfigError("head_dims must list at least one layer width")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd (same-padding is kernel_size // 2)")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def embed_dim(self) -> int:
        return self.head_dims[-1]

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        """Activation shape after each conv layer, checking the stack is consistent."""
        c, t, h, w = self.clip_shape
        pad = self.kernel_size // 2
        shapes = []
        for out_c, stride in zip(self.conv_channels, self.conv_strides):
            t, h, w = ((d + 2 * pad - self.kernel_size) // stride + 1 for d in (t, h, w))
            if min(t, h, w) < 1:
                raise ConfigError(f"conv stack collapses clip {self.clip_shape} to zero size")
            c = out_c
            shapes.append((c, t, h, w))
        return shapes


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-initialised weights, zero biases.  Key order is the canonical parameter order."""
    config.layer_shapes()
    params: dict[str, Tensor] = {}
    k = config.kernel_size
    in_c = config.clip_shape[0]
    for i, out_c in enumerate(config.conv_channels):
        fan_in = in_c * k ** 3
        params[f"backbone.conv{i}.weight"] = Tensor(he_normal(rng, (out_c, in_c, k, k, k), fan_in), requires_grad=True)
        params[f"backbone.conv{i}.bias"] = Tensor(np.zeros(out_c), requires_grad=True)
        in_c = out_c
    for branch in BRANCHES:
        in_d = config.feature_dim
        for j, out_d in enumerate(config.head_dims):
            params[f"head_{branch}.fc{j}.weight"] = Tensor(he_normal(rng, (in_d, out_d), in_d), requires_grad=True)
            params[f"head_{branch}.fc{j}.bias"] = Tensor(np.zeros(out_d), requires_grad=True)
            in_d = out_d
    return params


class Encoder:
    """Conv3d backbone with global average pooling plus one MLP head per branch."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def check_clip(self, clips: Tensor) -> bool:
        """Validate the clip shape; returns True when a batch axis is present."""
        expected = tuple(self.config.clip_shape)
        if clips.shape == expected:
            return False
        if clips.ndim == 5 and clips.shape[1:] == expected:
            return True
        raise DimensionError(f"clip shape {clips.shape} does not match configured {expected}")

    def features(self, clips: Tensor) -> Tensor:
        """Backbone output after global average pooling: ``[D_b]`` or ``[N, D_b]``."""
        batched = self.check_clip(clips)
        channel_axis = 1 if batched else 0
        pad = self.config.kernel_size // 2
        h = clips
        for i, stride in enumerate(self.config.conv_strides):
            h = T.conv3d(h, self.params[f"backbone.conv{i}.weight"], stride=stride, padding=pad)
            h = T.relu(T.add_bias(h, self.params[f"backbone.conv{i}.bias"], axis=channel_axis))
        return T.mean_pool_global(h)

    def project(self, features: Tensor, branch: str) -> Tensor:
        """Unnormalised head output for ``branch``; relu between layers only."""
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}")
        h = features if features.ndim == 2 else T.reshape(features, (1, -1))
        n_layers = len(self.config.head_dims)
        for j in range(n_layers):
            h = T.add_bias(T.matmul(h, self.params[f"head_{branch}.fc{j}.weight"]),
                           self.params[f"head_{branch}.fc{j}.bias"])
            if j < n_layers - 1:
                h = T.relu(h)
        return h if features.ndim == 2 else T.reshape(h, (-1,))

    def embed_all(self, clips: Tensor, strict: bool = False) -> dict[str, Tensor]:
        """Unit-norm embeddings for both branches, sharing one backbone pass."""
        feats = self.features(clips)
        return {b: T.l2_normalize(self.project(feats, b), strict=strict) for b in BRANCHES}


class EncoderPair:
    """Query encoder trained by SGD and its momentum (EMA) twin."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.query = Encoder(config, init_params(config, rng))
        key_params = {name: Tensor(p.data, requires_grad=False) for name, p in self.query.params.items()}
        self.key = Encoder(config, key_params)

    def side(self, side: str) -> Encoder:
        if side not in SIDES:
            raise ValueError(f"unknown side {side!r}")
        return self.query if side == "query" else self.key

    def query_params(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.query.params.items())

    def embed(self, clip: Tensor, branch: str, side: str) -> Tensor:
        """Unit-norm embedding of ``clip`` through the ``side`` encoder and ``branch`` head."""
        if branch not in BRANCHES:
            raise ValueError(f"unknown branch {branch!r}")
        enc = self.side(side)
        if side == "key":
            with T.no_grad():
                return T.l2_normalize(enc.project(enc.features(clip), branch), strict=False).detach()
        return T.l2_normalize(enc.project(enc.features(clip), branch), strict=False)

    def momentum_update(self, m: float) -> None:
        """theta_k <- m * theta_k + (1 - m) * theta_q for every weight, heads included."""
        if not 0.0 <= m <= 1.0:
            raise ConfigError(f"momentum must lie in [0, 1], got {m}")
        for name, q in self.query.params.items():
            k = self.key.params[name]
            if m == 1.0:
                continue
            if m == 0.0:
                k.data = q.data.copy()
                continue
            k.data = (m * k.data.astype(np.float64) + (1.0 - m) * q.data.astype(np.float64)).astype(k.dtype)

    def copy_query_to_key(self) -> None:
        self.momentum_update(0.0)

    def key_distance(self) -> float:
        """Euclidean distance between the flattened query and key weights."""
        total = 0.0
        for name, q in self.query.params.items():
            diff = q.data.astype(np.float64) - self.key.params[name].data.astype(np.float64)
            total += float(np.dot(diff.ravel(), diff.ravel()))
        return math.sqrt(total)


def anneal_momentum(progress: float, m0: float, schedule: str = "cosine") -> float:
    """Momentum coefficient at training ``progress`` in [0, 1], moving from ``m0`` to 1."""
    t = min(max(float(progress), 0.0), 1.0)
    if schedule == "cosine":
        return 1.0 - (1.0 - m0) * (math.cos(math.pi * t) + 1.0) / 2.0
    if schedule == "linear":
        return m0 + (1.0 - m0) * t
    raise ConfigError(f"unknown momentum schedule {schedule!r}")
