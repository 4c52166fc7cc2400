"""InfoNCE, the intra-video and nearest-neighbour losses, and their weighted sum.

All functions accept a single embedding ``[d]`` or a batch ``[N, d]``; batched
inputs return the mean over rows.  Queries carry gradients, keys and queue
contents are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .queues import DualQueues, EmbeddingQueue, nearest_neighbors
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_intra: float = 1.0
    lambda_nn: float = 1.0
    temperature: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_intra < 0 or self.lambda_nn < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lambda_intra == 0 and self.lambda_nn == 0:
            raise ConfigError("at least one of lambda_intra, lambda_nn must be non-zero")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def _rows(x) -> Tensor:
    x = T.as_tensor(x)
    return T.reshape(x, (1, -1)) if x.ndim == 1 else x


def _bank(negatives, dim: int, dtype) -> np.ndarray:
    if negatives is None:
        return np.zeros((0, dim), dtype=dtype)
    if isinstance(negatives, EmbeddingQueue):
        negatives = negatives.embeddings()
    bank = np.asarray(
        [n.data if isinstance(n, Tensor) else n for n in negatives] if isinstance(negatives, list) else negatives,
        dtype=dtype,
    )
    return bank.reshape(-1, dim)


def _zero(dtype) -> Tensor:
    return Tensor(0.0, dtype=dtype)


def info_nce(q, k_pos, negatives, tau: float) -> Tensor:
    """-log softmax of the positive logit among ``{k_pos} + negatives`` at temperature ``tau``.

    With no negatives the softmax has a single term and the loss is exactly 0.
    """
    _check_tau(tau)
    qr, kr = _rows(q), _rows(k_pos)
    bank = _bank(negatives, qr.shape[1], qr.dtype)
    pos = T.sum(T.mul(qr, kr), axis=-1)
    logits = T.reshape(pos, (-1, 1))
    if len(bank):
        logits = T.concat([logits, T.matmul(qr, Tensor(bank.T, dtype=qr.dtype))], axis=1)
    per_row = T.logsumexp(T.scale(logits, 1.0 / tau)) - T.scale(pos, 1.0 / tau)
    return T.mean(per_row)


def intra_loss(z1, z2, q_intra: EmbeddingQueue, tau: float) -> Tensor:
    """InfoNCE of ``z1`` against its sibling clip ``z2`` with the whole intra queue as negatives."""
    z2 = z2.detach() if isinstance(z2, Tensor) else z2
    return info_nce(z1, z2, q_intra.embeddings(), tau)


def nn_loss_with_picks(z1, z2, q_nn: EmbeddingQueue, tau: float, min_pool: int = 1) -> tuple[Tensor, np.ndarray | None]:
    """NN loss plus the queue index chosen for each row (``None`` while gated).

    The positive for ``z1`` is the queue entry closest to ``z2``; every other
    entry is a negative.  Since the positive lives in the queue, the logits are
    simply ``z1 . Q`` and the loss is ``logsumexp(row) - row[nn]``.
    """
    _check_tau(tau)
    z1r = _rows(z1)
    if len(q_nn) == 0 or len(q_nn) < min_pool:
        return _zero(z1r.dtype), None
    z2_data = z2.data if isinstance(z2, Tensor) else np.asarray(z2)
    bank = q_nn.embeddings().astype(z1r.dtype)
    picks = nearest_neighbors(z2_data.reshape(-1, bank.shape[1]), bank)
    logits = T.scale(T.matmul(z1r, Tensor(bank.T, dtype=z1r.dtype)), 1.0 / tau)
    per_row = T.logsumexp(logits) - T.pick(logits, picks)
    return T.mean(per_row), picks


def nn_loss(z1, z2, q_nn: EmbeddingQueue, tau: float, min_pool: int = 1) -> Tensor:
    return nn_loss_with_picks(z1, z2, q_nn, tau, min_pool)[0]


@dataclass
class LossBreakdown:
    total: Tensor
    intra_term: Tensor
    nn_term: Tensor
    forward_12: Tensor  # z1 as query against z2 keys
    forward_21: Tensor
    nn_picks: tuple[np.ndarray | None, np.ndarray | None] = field(default=(None, None))

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "intra": self.intra_term.item(),
            "nn": self.nn_term.item(),
            "dir_12": self.forward_12.item(),
            "dir_21": self.forward_21.item(),
        }


def combined_loss(
    z_intra_1q, z_intra_2k, z_intra_2q, z_intra_1k,
    z_nn_1q, z_nn_2k, z_nn_2q, z_nn_1k,
    queues: DualQueues,
    weights: LossWeights,
    min_nn_pool: int = 1,
    nn_path: bool = True,
) -> LossBreakdown:
    """Symmetrised weighted sum of the intra-video and NN losses.

    Each term averages its two directions; ``total`` equals
    ``lambda_intra * intra_term + lambda_nn * nn_term``.  ``nn_path=False``
    skips the NN branch entirely (its term is a constant zero).
    """
    tau = weights.temperature
    i12 = intra_loss(z_intra_1q, z_intra_2k, queues.intra, tau)
    i21 = intra_loss(z_intra_2q, z_intra_1k, queues.intra, tau)
    dtype = i12.dtype
    if nn_path:
        n12, picks12 = nn_loss_with_picks(z_nn_1q, z_nn_2k, queues.nn, tau, min_nn_pool)
        n21, picks21 = nn_loss_with_picks(z_nn_2q, z_nn_1k, queues.nn, tau, min_nn_pool)
    else:
        n12, n21, picks12, picks21 = _zero(dtype), _zero(dtype), None, None

    li, ln = weights.lambda_intra, weights.lambda_nn
    d12 = T.add(T.scale(i12, li), T.scale(n12, ln))
    d21 = T.add(T.scale(i21, li), T.scale(n21, ln))
    intra_term = T.scale(T.add(i12, i21), 0.5)
    nn_term = T.scale(T.add(n12, n21), 0.5)
    total = T.add(T.scale(intra_term, li), T.scale(nn_term, ln))
    return LossBreakdown(total, intra_term, nn_term, d12, d21, (picks12, picks21))
