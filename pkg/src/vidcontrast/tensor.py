"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every op in this module takes :class:`Tensor` inputs, computes its forward
value with numpy and, when gradient recording is enabled and some input
requires a gradient, records a closure mapping the output gradient to the
input gradients.  :meth:`Tensor.backward` walks the recorded graph once in
reverse topological order.

Values are 32-bit floats by default.  :func:`precision` switches the dtype
used for newly created tensors, which the finite-difference checks use to
run the same graphs in 64-bit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateVectorError, DimensionError, NonFiniteError

NORM_EPS = 1e-12

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype of newly constructed tensors."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional array that may participate in an autodiff graph.

    Leaves are created by the user; interior nodes are created by the ops
    below and remember their parents plus a backward closure.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype(), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        if not out.data.flags.c_contiguous:
            out.data = out.data.copy()
        out.grad = None
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        out._op = op
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        """A leaf sharing values with ``self`` but cut from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, name: str = "tensor") -> "Tensor":
        if not self.is_finite():
            bad = int(np.count_nonzero(~np.isfinite(self.data)))
            raise NonFiniteError(f"{name} holds {bad} non-finite value(s)")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- reverse pass -----------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor requiring grad")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _raise_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return Tensor._from_op(A @ B, (a, b), backward, "matmul")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise DimensionError(f"expected an int or a 3-tuple, got {v!r}")
    return t


def conv3d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation with zero padding.

    ``x`` is ``[C, T, H, W]`` or batched ``[N, C, T, H, W]``; ``kernels`` is
    ``[C_out, C_in, kT, kH, kW]``.  Output spatial size follows
    ``(in + 2*pad - k) // stride + 1`` per axis.
    """
    if kernels.ndim != 5:
        raise DimensionError(f"kernels must be 5-D, got {kernels.shape}")
    if x.ndim not in (4, 5):
        raise DimensionError(f"conv3d input must be 4-D or 5-D, got {x.shape}")
    batched = x.ndim == 5
    xd = x.data if batched else x.data[None]
    n, c, t, h, w = xd.shape
    o, ci, kt, kh, kw = kernels.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels but kernels expect {ci}")
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if min(st, sh, sw) < 1 or min(pt, ph, pw) < 0:
        raise DimensionError("stride must be >= 1 and padding >= 0")
    if kt > t + 2 * pt or kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"kernel {kernels.shape[2:]} larger than padded input {(t, h, w)}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    windows = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    cols = windows.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, c * kt * kh * kw)
    wmat = kernels.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, to, ho, wo, o).transpose(0, 4, 1, 2, 3)
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gmat = gb.transpose(0, 2, 3, 4, 1).reshape(-1, o)
        dw = (gmat.T @ cols).reshape(kernels.shape)
        dcols = (gmat @ wmat).reshape(n, to, ho, wo, c, kt, kh, kw)
        dxp = np.zeros_like(xp)
        for a in range(kt):
            for b in range(kh):
                for d in range(kw):
                    dxp[:, :, a:a + st * to:st, b:b + sh * ho:sh, d:d + sw * wo:sw] += (
                        dcols[..., a, b, d].transpose(0, 4, 1, 2, 3)
                    )
        dx = dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]
        return (dx if batched else dx[0]), dw

    return Tensor._from_op(out, (x, kernels), backward, "conv3d")


# ---------------------------------------------------------------------------
# elementwise and reductions


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return Tensor._from_op(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x`` (the only broadcast allowed)."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias {bias.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        return g, g.sum(axis=other_axes)

    return Tensor._from_op(x.data + bias.data.reshape(view), (x, bias), backward, "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def mean_pool_global(x: Tensor) -> Tensor:
    """Average over the trailing (T, H, W) axes: one value per channel."""
    if x.ndim < 4:
        raise DimensionError(f"mean_pool_global expects [..., C, T, H, W], got {x.shape}")
    axes = (-3, -2, -1)
    count = int(np.prod(x.shape[-3:]))
    in_shape = x.shape

    def backward(g):
        return (np.broadcast_to(g[..., None, None, None] / g.dtype.type(count), in_shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=axes, dtype=np.float64).astype(x.dtype), (x,), backward, "mean_pool")


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    in_shape = x.shape
    if axis is None:

        def backward(g):
            return (np.full(in_shape, g.reshape(()), dtype=g.dtype),)

        return Tensor._from_op(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,), backward, "sum")

    ax = axis % x.ndim

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g, ax), in_shape).copy(),)

    return Tensor._from_op(x.data.sum(axis=ax), (x,), backward_axis, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``."""
    ax = axis % x.ndim
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    softmax = e / s

    def backward(g):
        return (np.expand_dims(g, ax) * softmax,)

    return Tensor._from_op(out, (x,), backward, "logsumexp")


def pick(x: Tensor, index: Sequence[int]) -> Tensor:
    """Row-wise gather: ``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    if x.ndim != 2:
        raise DimensionError(f"pick expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (x.shape[0],):
        raise DimensionError(f"pick needs one index per row, got {idx.shape} for {x.shape}")
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return Tensor._from_op(x.data[rows, idx], (x,), backward, "pick")


def l2_normalize(v: Tensor, eps: float = NORM_EPS, strict: bool = True) -> Tensor:
    """Scale vectors along the last axis to unit Euclidean norm.

    With ``strict`` a norm at or below ``eps`` raises
    :class:`DegenerateVectorError`; otherwise the norm is clamped to ``eps``.
    """
    if v.ndim not in (1, 2) or v.shape[-1] < 1:
        raise DimensionError(f"l2_normalize expects [d] or [n, d], got {v.shape}")
    norm = np.sqrt((v.data.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    if strict and np.any(norm <= eps):
        raise DegenerateVectorError(f"cannot normalize vector with norm <= {eps}")
    clamped = np.maximum(norm, eps)
    y = (v.data / clamped).astype(v.dtype)
    live = norm > eps

    def backward(g):
        gy = (g * y).sum(axis=-1, keepdims=True)
        dv = np.where(live, g - y * gy, g) / clamped
        return (dv.astype(g.dtype),)

    return Tensor._from_op(y, (v,), backward, "l2_normalize")
