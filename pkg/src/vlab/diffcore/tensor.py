"""Reverse-mode differentiable tensors on numpy arrays.

The op set is deliberately small: matmul, add, mul, transpose, reshape,
concat, getitem, take_rows, softmax, layer_norm, gelu, cross_entropy,
sum/mean reductions and elementwise power. Everything else in the package
is composed from these, so the backward-rule surface stays auditable.

Graphs are single-writer: one forward pass builds one implicit tape
(parent links on each result tensor) and one ``backward`` call consumes
it. Results are deterministic given identical inputs; there is no
run-order nondeterminism anywhere in this module.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from ..errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_GUARD = False


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly lifted arrays (float64 by default)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def enable_guard(on: bool = True) -> None:
    """Check every op result for NaN/Inf (debug aid, off by default)."""
    global _GUARD
    _GUARD = bool(on)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (cheap evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional array with an optional gradient slot.

    ``data`` is a numpy array. ``grad`` is filled (same shape) by
    ``backward``. Tensors produced by ops carry parent links and a
    backward closure; leaves carry neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_param", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_param = False
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Fill ``grad`` of every reachable tensor with d(self)/d(tensor).

        ``self`` must be scalar-valued. Gradients accumulate additively
        across uses of a tensor and across repeated backward calls (call
        ``zero_grad`` between steps).
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        self._accum(np.ones_like(self.data))
        for node in reversed(topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, Tensor._lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, Tensor._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor._lift(-1.0))

    def __sub__(self, other):
        return add(self, -Tensor._lift(other))

    def __rsub__(self, other):
        return add(Tensor._lift(other), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_scalar(other, -1.0))
        return mul(self, Tensor._lift(1.0 / other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Wrap an op result, attaching the tape entry when grads are live."""
    if _GUARD and not np.all(np.isfinite(data)):
        raise ContractError(f"non-finite values produced by op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_param = False
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def topo_order(root: Tensor) -> list:
    """Tape reconstruction: ops in an order where inputs precede users."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor._lift(a), Tensor._lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor._lift(a), Tensor._lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a fixed real exponent."""
    a = Tensor._lift(a)
    data = a.data**p

    def backward(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward, f"pow{p}")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = Tensor._lift(a)
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            sech2 = 1.0 - t * t
            d_inner = c * (1.0 + 3.0 * 0.044715 * x**2)
            a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _make(data, (a,), backward, "gelu")


# -- shape manipulation ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with shared leading batch dims.

    Accepts ``a: (..., m, k)`` and ``b: (..., k, n)``; leading dims
    broadcast (typically ``b`` is an unbatched weight).
    """
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = Tensor._lift(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inv))

    return _make(data, (a,), backward, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    a = Tensor._lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.shape))

    return _make(data, (a,), backward, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)
        )
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + s)
                t._accum(g[tuple(idx)])
            start += s

    return _make(data, tuple(tensors), backward, "concat")


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing (ints and slices); backward scatters into zeros."""
    a = Tensor._lift(a)
    data = a.data[key]
    if isinstance(data, np.generic):
        data = np.asarray(data)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[key] += g
            a._accum(ga)

    return _make(data, (a,), backward, "getitem")


def take_rows(a: Tensor, ids) -> Tensor:
    """Row gather along axis 0 (embedding lookup); scatter-add backward."""
    a = Tensor._lift(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: ids out of range for {a.shape[0]} rows")
    data = a.data[ids]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, ids, g)
            a._accum(ga)

    return _make(data, (a,), backward, "take_rows")


# -- reductions --------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = Tensor._lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            a._accum(_spread(g, a.shape, axis, keepdims))

    return _make(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = Tensor._lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in _normalize_axes(axis, a.ndim)]
    )

    def backward(g):
        if a.requires_grad:
            a._accum(_spread(g, a.shape, axis, keepdims) / count)

    return _make(np.asarray(data), (a,), backward, "mean")


def _normalize_axes(axis, ndim):
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _spread(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, _normalize_axes(axis, len(shape)))
    return np.broadcast_to(g, shape)


# -- normalizations and losses ------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; safe for huge logits."""
    a = Tensor._lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            a._accum(s * (g - dot))

    return _make(s, (a,), backward, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean and unit variance."""
    a = Tensor._lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def backward(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            a._accum(inv * (g - gm - xhat * gx))

    return _make(xhat, (a,), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row softmax cross-entropy: logits (M, V), integer targets (M,).

    Returns the (M,) vector of losses; callers reduce with ``mean``.
    Computed via log-sum-exp with max subtraction.
    """
    logits = Tensor._lift(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: {targets.shape} targets for logits {logits.shape}"
        )
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).reshape(-1)
    rows = np.arange(x.shape[0])
    data = lse - x[rows, targets]

    def backward(g):
        if logits.requires_grad:
            p = e / z
            p[rows, targets] -= 1.0
            logits._accum(g[:, None] * p)

    return _make(data, (logits,), backward, "cross_entropy")
