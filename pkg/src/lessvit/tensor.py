"""Dense array arithmetic with reverse-mode gradients and a MAC counter.

Tensors wrap contiguous numpy buffers (float64 in verify mode, float32 in
bench mode). Differentiable operations append nodes to the active ``Tape``;
``Tape.backward`` replays the recorded nodes in reverse, visiting each node
exactly once and accumulating gradients additively across fan-out.

Multiply-accumulate operations are attributed to matrix products only:
every matmul adds ``batch * m * k * n`` to each active ``FlopCounter``.
Softmax, normalization and elementwise work are deliberately excluded.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "FlopCounter",
    "DimensionError",
    "DegenerateMaskError",
    "ContractError",
    "set_precision",
    "precision",
    "default_dtype",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "kron",
    "transpose",
    "reshape",
    "concat",
    "take",
    "scatter_rows",
    "broadcast_to",
    "softmax",
    "layernorm",
    "gelu",
    "tsum",
    "tmean",
    "mse",
    "cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes violate an operation's precondition."""


class DegenerateMaskError(ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(ValueError):
    """An operation contract was violated (e.g. non-scalar backward root)."""


_DTYPE = np.float64


def set_precision(mode: str) -> None:
    """Switch scalar precision: "f64" for verify mode, "f32" for bench mode."""
    global _DTYPE
    if mode == "f64":
        _DTYPE = np.float64
    elif mode == "f32":
        _DTYPE = np.float32
    else:
        raise ValueError(f"unknown precision mode {mode!r}")


def precision() -> str:
    return "f64" if _DTYPE is np.float64 else "f32"


def default_dtype():
    return _DTYPE


# ---------------------------------------------------------------------------
# Core containers


class Tensor:
    """Immutable dense array with an optional gradient requirement.

    ``data`` is always a C-contiguous ndarray in the current precision;
    ``reshape`` and ``transpose`` copy metadata, never mutate buffers.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_DTYPE))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        nm = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg}{nm})"

    # operator sugar; every overload routes through the module-level ops so
    # recording and counting stay in one place
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple, vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


_TAPES: list["Tape"] = []
_COUNTERS: list["FlopCounter"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around a forward pass; ``backward`` then walks
    the record once in reverse topological (reverse execution) order. A tape
    serves a single forward/backward pass; concurrent passes need their own.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def backward(self, loss: Tensor, params: Iterable[Tensor]) -> dict:
        """Gradient of a scalar ``loss`` w.r.t. each tensor in ``params``.

        Returns ``{id(param): ndarray}``; parameters that do not participate
        in the recorded graph map to zeros of their shape.
        """
        if loss.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            for parent, g in zip(node.parents, node.vjp(g_out)):
                if g is None:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + g
                else:
                    grads[pid] = g
        out = {}
        for p in params:
            out[id(p)] = grads.get(id(p), np.zeros_like(p.data))
        return out


class FlopCounter:
    """Monotone counter of multiply-accumulate operations in matrix products."""

    def __init__(self):
        self.mac_count = 0

    def __enter__(self) -> "FlopCounter":
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.pop()


def _record(out: Tensor, parents: Sequence, vjp: Callable) -> None:
    if _TAPES:
        kept = tuple(p for p in parents if isinstance(p, Tensor))
        _TAPES[-1].nodes.append(_Node(out, kept, vjp))


def _count_macs(n: int) -> None:
    for c in _COUNTERS:
        c.mac_count += n


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


# ---------------------------------------------------------------------------
# Matrix products


def matmul(a, b) -> Tensor:
    """Matrix product with stacked leading batch axes (numpy semantics).

    A product of shapes ``(..., m, k) @ (..., k, n)`` adds ``batch*m*k*n``
    MACs to every active counter, where ``batch`` is the broadcast size of
    the leading axes (1 for plain 2-D operands).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    if b.ndim == 2 and a.ndim > 2:
        # one fat GEMM instead of a stack of skinny ones
        lead = a.shape[:-1]
        out_data = (a.data.reshape(-1, k) @ b.data).reshape(*lead, n)
        _count_macs(a.data.size // k * k * n)
        out = Tensor(out_data)

        def vjp_flat(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
            return ga, gb

        _record(out, (a, b), vjp_flat)
        return out
    out_data = np.matmul(a.data, b.data)
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    _count_macs(batch * m * k * n)
    out = Tensor(out_data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    _record(out, (a, b), vjp)
    return out


def kron(a, b) -> Tensor:
    """Kronecker product of two matrices: out[(i*m+k),(j*n+l)] = a[i,j]*b[k,l]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("kron operands must be 2-D")
    p, q = a.shape
    m, n = b.shape
    out = Tensor(np.kron(a.data, b.data))

    def vjp(g):
        g4 = g.reshape(p, m, q, n)
        ga = np.einsum("ikjl,kl->ij", g4, b.data)
        gb = np.einsum("ikjl,ij->kl", g4, a.data)
        return ga, gb

    _record(out, (a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# Shape manipulation


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    _record(out, (a,), lambda g: (np.transpose(g, inverse),))
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(old),))
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    _record(out, tuple(parts), vjp)
    return out


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by an integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(np.take(a.data, idx, axis=axis))
    src_shape = a.shape
    unique = len(np.unique(idx)) == len(idx)

    def vjp(g):
        ga = np.zeros(src_shape, dtype=g.dtype)
        key = (slice(None),) * axis + (idx,)
        if unique:
            ga[key] = g
        else:
            np.add.at(ga, key, g)  # duplicates must accumulate
        return (ga,)

    _record(out, (a,), vjp)
    return out


def scatter_rows(base, indices, values, axis: int = 0) -> Tensor:
    """Copy of ``base`` with slices at ``indices`` (along ``axis``) replaced.

    Indices must be unique; duplicate targets would make the result
    order-dependent.
    """
    base, values = _as_tensor(base), _as_tensor(values)
    idx = np.asarray(indices, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ContractError("scatter_rows requires unique indices")
    data = base.data.copy()
    key = (slice(None),) * axis + (idx,)
    data[key] = values.data
    out = Tensor(data)

    def vjp(g):
        gb = g.copy()
        gb[key] = 0.0
        gv = g[key]
        return gb, gv

    _record(out, (base, values), vjp)
    return out


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    src_shape = a.shape
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    _record(out, (a,), lambda g: (_unbroadcast(g, src_shape),))
    return out


def _getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data[key])
    src_shape = a.shape

    def vjp(g):
        ga = np.zeros(src_shape, dtype=g.dtype)
        ga[key] = g
        return (ga,)

    _record(out, (a,), vjp)
    return out


# ---------------------------------------------------------------------------
# Nonlinearities and reductions


def softmax(x, mask=None) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability.

    ``mask`` is a boolean array broadcastable to ``x``; masked entries are
    exactly zero in the output. Every row must keep at least one unmasked
    entry, otherwise ``DegenerateMaskError`` is raised.
    """
    x = _as_tensor(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mb = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mb.any(axis=-1).all():
            raise DegenerateMaskError("softmax row with every entry masked")
        neg_inf = np.where(mb, x.data, -np.inf)
        shifted = x.data - neg_inf.max(axis=-1, keepdims=True)
        e = np.where(mb, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    _record(out, (x,), vjp)
    return out


def layernorm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Per-row standardization over the last axis followed by an affine map."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layernorm needs at least 2 features per row")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    _record(out, (x, gamma, beta), vjp)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact Gaussian error linear unit: x * Phi(x)."""
    x = _as_tensor(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi_cdf)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi_cdf + x.data * pdf),)

    _record(out, (x,), vjp)
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    src_shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src_shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).copy(),)

    _record(out, (a,), vjp)
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def mse(pred, target) -> Tensor:
    """Mean squared error over all entries."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return tmean(mul(diff, diff))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row logits."""
    logits = _as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise DimensionError("cross_entropy expects (n, k) logits and (n,) labels")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    n = y.shape[0]
    out = Tensor(-logp[np.arange(n), y].mean())

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (g * p / n,)

    _record(out, (logits,), vjp)
    return out
