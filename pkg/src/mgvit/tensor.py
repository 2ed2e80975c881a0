"""A small reverse-mode autodiff tensor on top of numpy (float64 only).

Every :class:`Tensor` produced by an operation remembers its parents and a
closure that maps the output gradient to parent gradients.  Tensors carry a
monotonically increasing creation id, so the set of recorded operations is a
tape: :meth:`Tensor.backward` replays it in exact reverse creation order.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError, InputError, UsageError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "set_finite_checks",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "concat",
    "cross_entropy",
]

_ids = itertools.count()
_grad_enabled = True
_check_finite = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf guard run after every operation.  Returns the old value."""
    global _check_finite
    old, _check_finite = _check_finite, bool(enabled)
    return old


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if _check_finite and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced{' in ' + name if name else ''}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._id = next(_ids)
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- tape -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every tensor ``t`` that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not on the tape")

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        pending = {self._id: np.asarray(grad, dtype=np.float64)}
        for tid in sorted(nodes, reverse=True):
            t = nodes[tid]
            g = pending.pop(tid, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            t.grad = g if t.grad is None else t.grad + g
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in pending:
                    pending[parent._id] = pending[parent._id] + pg
                else:
                    pending[parent._id] = pg

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _make(self.data + other.data, (self, other),
                     lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _make(self.data - other.data, (self, other),
                     lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return _make(x * y, (self, other),
                     lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return _make(x / y, (self, other),
                     lambda g: (_unbroadcast(g / y, x.shape),
                                _unbroadcast(-g * x / (y * y), y.shape)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape
        out = self.data[idx]

        def back(g):
            full = np.zeros(shape)
            if _is_basic_index(idx):
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return _make(out, (self,), back)

    # -- shape ops ------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return _make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # -- reductions & elementwise --------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        y = np.exp(self.data)
        return _make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,))

    def abs(self):
        x = self.data
        return _make(np.abs(x), (self,), lambda g: (g * np.sign(x),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, backward: Callable) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# ----------------------------------------------------------------------
# functional ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    if y.ndim == 2 and x.ndim > 2:
        # batched activations times a weight matrix: one flat GEMM each way
        k, n = y.shape
        out = (x.reshape(-1, k) @ y).reshape(x.shape[:-1] + (n,))

        def back(g):
            return g @ y.T, x.reshape(-1, k).T @ g.reshape(-1, n)

        return _make(out, (a, b), back)

    def back(g):
        return (_unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape),
                _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape))

    return _make(x @ y, (a, b), back)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with biased variance, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), back)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    v = x.data
    cdf = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * v * v)
    return _make(v * cdf, (x,), lambda g: (g * (cdf + v * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0,
                  reduction: str = "mean") -> Tensor:
    """Label-smoothed softmax cross-entropy for ``logits`` of shape (B, C).

    The target distribution is ``(1 - smoothing) * onehot + smoothing / C``.
    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-sample vector).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {b} rows")
    if ((labels < 0) | (labels >= c)).any():
        raise InputError(f"cross_entropy: labels must lie in [0, {c}), got {labels.tolist()}")
    if not 0.0 <= smoothing < 1.0:
        raise InputError(f"label smoothing must be in [0, 1), got {smoothing}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((b, c), smoothing / c)
    target[np.arange(b), labels] += 1.0 - smoothing
    per_sample = -(target * logp).sum(axis=1)
    dlogits = np.exp(logp) - target

    if reduction == "none":
        return _make(per_sample, (logits,), lambda g: (g[:, None] * dlogits,))
    if reduction == "sum":
        return _make(per_sample.sum(), (logits,), lambda g: (g * dlogits,))
    if reduction == "mean":
        return _make(per_sample.mean(), (logits,), lambda g: (g * dlogits / b,))
    raise InputError(f"unknown reduction {reduction!r}")
