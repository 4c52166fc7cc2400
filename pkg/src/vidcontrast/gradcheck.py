"""Central finite-difference checks for the autodiff core."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(
    fn: Callable[[], Tensor],
    leaf: Tensor,
    eps: float = 1e-3,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Estimate d fn() / d leaf by central differences, perturbing ``leaf`` in place.

    Only the entries in ``indices`` are estimated when given; the rest of
    the returned array is NaN.
    """
    out = np.full(leaf.shape, np.nan, dtype=np.float64)
    positions = indices if indices is not None else list(np.ndindex(*leaf.shape))
    with no_grad():
        for pos in positions:
            orig = leaf.data[pos].copy()
            leaf.data[pos] = orig + eps
            plus = float(fn().data.sum(dtype=np.float64))
            leaf.data[pos] = orig - eps
            minus = float(fn().data.sum(dtype=np.float64))
            leaf.data[pos] = orig
            out[pos] = (plus - minus) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor), ignoring NaN slots."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(n)
    if not mask.any():
        return 0.0
    a, n = a[mask], n[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    eps: float = 1e-3,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Run one backward pass of ``fn`` and compare every leaf against finite differences.

    With ``samples`` set, only that many randomly chosen entries (across all
    leaves) are checked.  Returns the worst relative error.
    """
    for leaf in leaves:
        leaf.zero_grad()
    fn().backward()
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.astype(np.float64) for leaf in leaves]

    chosen: list[list[tuple[int, ...]] | None] = [None] * len(leaves)
    if samples is not None:
        rng = rng or np.random.default_rng(0)
        sizes = np.array([leaf.data.size for leaf in leaves])
        flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        chosen = [[] for _ in leaves]
        for f in flat:
            li = int(np.searchsorted(offsets, f, side="right") - 1)
            chosen[li].append(np.unravel_index(int(f - offsets[li]), leaves[li].shape))

    worst = 0.0
    for leaf, grad, idx in zip(leaves, analytic, chosen):
        if idx is not None and not idx:
            continue
        numeric = numerical_grad(fn, leaf, eps, idx)
        worst = max(worst, relative_error(grad, numeric))
    return worst
