"""Downstream protocols on frozen features: linear probe, retrieval, few-shot, NN quality."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import SyntheticVideo, VideoSpec, center_view
from .encoder import Encoder
from .errors import ConfigError, DataError
from .tensor import Tensor


@dataclass
class FrozenFeatures:
    features: np.ndarray  # [n, D_b]
    class_ids: np.ndarray
    video_ids: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.video_ids = np.asarray(self.video_ids, dtype=np.int64)
        n = len(self.features)
        if self.features.ndim != 2 or len(self.class_ids) != n or len(self.video_ids) != n:
            raise DataError("features, class_ids and video_ids must align")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, index: np.ndarray) -> "FrozenFeatures":
        return FrozenFeatures(self.features[index], self.class_ids[index], self.video_ids[index], self.split)


@dataclass
class RetrievalResult:
    recall: dict[int, float]

    def as_dict(self) -> dict[str, float]:
        return {f"R@{k}": v for k, v in sorted(self.recall.items())}


# ---------------------------------------------------------------------------
# feature extraction


def embed_clips(encoder: Encoder, clips: np.ndarray, branch: str | None = None, chunk: int = 128) -> np.ndarray:
    """Backbone features (``branch=None``) or unit-norm head embeddings, no gradients."""
    out = []
    with T.no_grad():
        for start in range(0, len(clips), chunk):
            x = Tensor(clips[start:start + chunk])
            feats = encoder.features(x)
            if branch is None:
                out.append(feats.data)
            else:
                out.append(T.l2_normalize(encoder.project(feats, branch), strict=False).data)
    return np.concatenate(out, axis=0)


def extract_features(encoder: Encoder, videos: Sequence[SyntheticVideo], split: str, spec: VideoSpec) -> FrozenFeatures:
    """Pre-head backbone features from the centre view of every video."""
    if tuple(encoder.config.clip_shape) != (1, spec.clip_len, spec.crop_size, spec.crop_size):
        raise ConfigError("video spec does not match the encoder's configured clip shape")
    if not videos:
        return FrozenFeatures(np.zeros((0, encoder.config.feature_dim)), [], [], split)
    clips = np.stack([center_view(v, spec) for v in videos])
    feats = embed_clips(encoder, clips)
    return FrozenFeatures(feats, [v.class_id for v in videos], [v.video_id for v in videos], split)


def stratified_split(videos: Sequence[SyntheticVideo], test_fraction: float = 0.2) -> tuple[list, list]:
    """Per class, the last ``round(test_fraction * n_c)`` videos (by id) go to test."""
    by_class: dict[int, list[SyntheticVideo]] = {}
    for v in sorted(videos, key=lambda v: v.video_id):
        by_class.setdefault(v.class_id, []).append(v)
    train, test = [], []
    for cls in sorted(by_class):
        members = by_class[cls]
        n_test = int(round(test_fraction * len(members)))
        n_test = min(max(n_test, 1), len(members) - 1) if len(members) > 1 else 0
        train.extend(members[:len(members) - n_test])
        test.extend(members[len(members) - n_test:])
    return sorted(train, key=lambda v: v.video_id), sorted(test, key=lambda v: v.video_id)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    losses: list[float]

    def predict(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.mean) / self.std
        return self.classes[np.argmax(z @ self.weights + self.bias, axis=1)]


def _softmax_xent(logits: np.ndarray, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float((onehot * logp).sum(axis=1).mean())
    return loss, np.exp(logp)


def fit_linear_probe(train: FrozenFeatures, epochs: int = 200, lr: float = 1.0) -> ProbeModel:
    """Multinomial logistic regression by full-batch gradient descent on standardised features."""
    classes = np.unique(train.class_ids)
    if len(classes) < 2:
        raise ConfigError("linear probe needs at least two classes in the training set")
    x = train.features.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    z = (x - mean) / std
    onehot = (train.class_ids[:, None] == classes[None, :]).astype(np.float64)
    n, d = z.shape
    w = np.zeros((d, len(classes)))
    b = np.zeros(len(classes))
    losses = []
    for _ in range(epochs):
        loss, prob = _softmax_xent(z @ w + b, onehot)
        losses.append(loss)
        g = (prob - onehot) / n
        w -= lr * (z.T @ g)
        b -= lr * g.sum(axis=0)
    losses.append(_softmax_xent(z @ w + b, onehot)[0])
    return ProbeModel(w, b, classes, mean, std, losses)


def linear_probe(train: FrozenFeatures, test: FrozenFeatures, epochs: int = 200, lr: float = 1.0) -> float:
    """Top-1 test accuracy of a linear classifier fit on frozen training features."""
    if len(test) == 0:
        raise ConfigError("empty test split")
    model = fit_linear_probe(train, epochs, lr)
    return float(np.mean(model.predict(test.features.astype(np.float64)) == test.class_ids))


# ---------------------------------------------------------------------------
# retrieval and neighbour statistics


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def recall_at_k(query: FrozenFeatures, gallery: FrozenFeatures, ks: Sequence[int] = (1, 5, 10, 20)) -> RetrievalResult:
    """Share of queries with a same-class item among their top-k cosine neighbours in the gallery."""
    if len(gallery) == 0:
        raise ConfigError("empty retrieval gallery")
    if any(k > len(gallery) or k < 1 for k in ks):
        raise ConfigError(f"k must be in [1, {len(gallery)}], got {list(ks)}")
    if len(query) == 0:
        return RetrievalResult({int(k): math.nan for k in ks})
    sims = _unit_rows(query.features) @ _unit_rows(gallery.features).T
    order = np.argsort(-sims, axis=1, kind="stable")
    match = gallery.class_ids[order] == query.class_ids[:, None]
    first_hit = np.where(match.any(axis=1), match.argmax(axis=1), len(gallery))
    return RetrievalResult({int(k): float(np.mean(first_hit < k)) for k in ks})


def topk_same_class_fraction(embeddings: np.ndarray, labels: np.ndarray, k: int = 5) -> float:
    """Mean share of each item's top-k cosine neighbours (self excluded) sharing its label."""
    n = len(embeddings)
    if n < k + 1:
        raise ConfigError(f"need more than {k} items for top-{k} neighbour statistics, got {n}")
    sims = _unit_rows(embeddings) @ _unit_rows(embeddings).T
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    labels = np.asarray(labels)
    return float(np.mean(labels[order] == labels[:, None]))


def nn_quality(encoder: Encoder, videos: Sequence[SyntheticVideo], spec: VideoSpec, k: int = 5) -> float:
    """Top-k same-class fraction in the NN-head embedding space of the query encoder."""
    if len(videos) < k + 1:
        raise ConfigError(f"nn_quality needs at least {k + 1} videos")
    clips = np.stack([center_view(v, spec) for v in videos])
    emb = embed_clips(encoder, clips, branch="nn")
    return topk_same_class_fraction(emb, np.array([v.class_id for v in videos]), k)


# ---------------------------------------------------------------------------
# few-shot subsets and the co-occurrence estimate


def few_shot_subset(features: FrozenFeatures, fraction: float, seed: int) -> FrozenFeatures:
    """Class-stratified deterministic subsample keeping ``floor(fraction * n_c)`` per class."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return features.subset(np.arange(len(features)))
    rng = np.random.default_rng(seed)
    keep = []
    for cls in np.unique(features.class_ids):
        members = np.flatnonzero(features.class_ids == cls)
        n_keep = int(math.floor(fraction * len(members) + 1e-9))
        if n_keep < 1:
            raise ConfigError(f"fraction {fraction} leaves class {cls} with no samples")
        keep.extend(rng.permutation(members)[:n_keep].tolist())
    return features.subset(np.sort(np.array(keep, dtype=np.int64)))


def cooccurrence_probability(n_classes: int, queue_size: int) -> float:
    """Chance that ``queue_size`` uniform draws over balanced classes include the query's class.

    Evaluates ``1 - ((K - 1) / K) ** q`` via ``-expm1(q * log1p(-1 / K))``.
    """
    if n_classes < 1:
        raise ConfigError("number of classes must be >= 1")
    if queue_size < 0:
        raise ConfigError("queue size must be >= 0")
    if queue_size == 0:
        return 0.0
    if n_classes == 1:
        return 1.0
    return float(-math.expm1(queue_size * math.log1p(-1.0 / n_classes)))
