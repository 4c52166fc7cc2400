"""Fixed-capacity FIFO embedding queues and nearest-neighbour lookup."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, EmptyQueueError

UNIT_TOL = 1e-5


@dataclass(frozen=True)
class QueueEntry:
    embedding: np.ndarray
    video_id: int
    class_id: int | None = None


class EmbeddingQueue:
    """Ring buffer of unit-norm embeddings; index 0 is always the oldest entry.

    ``class_id`` is carried for analysis only.  Nothing on the training path
    reads it; :meth:`class_ids` exists for the NN-quality metric.
    """

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ContractError("queue capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._emb = np.zeros((self.capacity, self.dim), dtype=dtype)
        self._video = np.full(self.capacity, -1, dtype=np.int64)
        self._cls = np.full(self.capacity, -1, dtype=np.int64)
        self._cursor = 0  # next write slot
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def _order(self) -> np.ndarray:
        start = (self._cursor - self._len) % self.capacity
        return (start + np.arange(self._len)) % self.capacity

    def embeddings(self) -> np.ndarray:
        """Stored embeddings, oldest first (a copy)."""
        return self._emb[self._order()]

    def video_ids(self) -> np.ndarray:
        return self._video[self._order()]

    def class_ids(self) -> np.ndarray:
        """Analysis-only labels, -1 where unknown."""
        return self._cls[self._order()]

    def entries(self) -> list[QueueEntry]:
        cls = self.class_ids()
        return [
            QueueEntry(e, int(v), None if c < 0 else int(c))
            for e, v, c in zip(self.embeddings(), self.video_ids(), cls)
        ]

    def enqueue(self, embeddings: np.ndarray, video_ids: Sequence[int], class_ids: Sequence[int | None] | None = None) -> None:
        """Append a batch, evicting the oldest entries once capacity is exceeded."""
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb[None]
        n = emb.shape[0]
        if emb.shape[1:] != (self.dim,):
            raise ContractError(f"expected embeddings of dim {self.dim}, got {emb.shape}")
        if n > self.capacity:
            raise ContractError(f"batch of {n} exceeds queue capacity {self.capacity}")
        norms = np.linalg.norm(emb, axis=1)
        if n and np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError("queue only accepts unit-norm embeddings")
        vids = np.asarray(video_ids, dtype=np.int64).reshape(-1)
        if vids.shape[0] != n:
            raise ContractError("one video id per embedding required")
        if class_ids is None:
            cls = np.full(n, -1, dtype=np.int64)
        else:
            cls = np.array([-1 if c is None else int(c) for c in class_ids], dtype=np.int64)
        slots = (self._cursor + np.arange(n)) % self.capacity
        self._emb[slots] = emb
        self._video[slots] = vids
        self._cls[slots] = cls
        self._cursor = (self._cursor + n) % self.capacity
        self._len = min(self.capacity, self._len + n)

    def enqueue_batch(self, batch: Sequence[QueueEntry]) -> None:
        if not batch:
            return
        self.enqueue(
            np.stack([e.embedding for e in batch]),
            [e.video_id for e in batch],
            [e.class_id for e in batch],
        )

    def clear(self) -> None:
        self._cursor = 0
        self._len = 0

    # -- (de)serialisation helpers used by checkpoints -------------------

    def state(self) -> dict:
        return {
            "embeddings": self.embeddings(),
            "video_ids": self.video_ids().tolist(),
            "class_ids": self.class_ids().tolist(),
        }

    def load_state(self, state: dict) -> None:
        self.clear()
        emb = np.asarray(state["embeddings"])
        if len(emb):
            # stored values are already unit norm in the stored precision
            n = emb.shape[0]
            self._emb[:n] = emb
            self._video[:n] = np.asarray(state["video_ids"], dtype=np.int64)
            self._cls[:n] = np.asarray(state["class_ids"], dtype=np.int64)
            self._len = n
            self._cursor = n % self.capacity


def similarity_row(x: np.ndarray, queue: EmbeddingQueue) -> np.ndarray:
    """Dot products between ``x`` and every queue entry, oldest first."""
    if len(queue) == 0:
        raise EmptyQueueError("similarity against an empty queue")
    return queue.embeddings().astype(np.float64) @ np.asarray(x, dtype=np.float64)


def nearest_neighbor(x: np.ndarray, queue: EmbeddingQueue) -> tuple[int, np.ndarray]:
    """Index and embedding of the entry with the largest dot product with ``x``.

    Ties go to the lowest index, i.e. the oldest entry.
    """
    sims = similarity_row(x, queue)
    idx = int(np.argmax(sims))
    return idx, queue.embeddings()[idx]


def nearest_neighbors(xs: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Row-wise argmax of ``xs @ bank.T`` (first index wins ties)."""
    sims = np.asarray(xs, dtype=np.float64) @ np.asarray(bank, dtype=np.float64).T
    return np.argmax(sims, axis=1)


def negatives_excluding(queue: EmbeddingQueue, exclude_index: int) -> np.ndarray:
    """All queue embeddings except ``exclude_index``, order preserved."""
    if not 0 <= exclude_index < len(queue):
        raise ContractError(f"index {exclude_index} out of range for queue of length {len(queue)}")
    emb = queue.embeddings()
    return np.delete(emb, exclude_index, axis=0)


@dataclass
class DualQueues:
    """The intra-video negative queue and the NN candidate/negative queue."""

    intra: EmbeddingQueue
    nn: EmbeddingQueue

    @classmethod
    def create(cls, capacity: int, dim: int) -> "DualQueues":
        return cls(EmbeddingQueue(capacity, dim), EmbeddingQueue(capacity, dim))
