"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records every differentiable operation in execution order (which is
already topological), and ``backward`` sweeps it in reverse, accumulating
gradients additively across fan-out.  Tensors and the tape they were recorded
on are confined to a single thread; distinct tapes share no mutable state.
"""

from __future__ import annotations

import numpy as np

LOG_GUARD = 1e-12


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero-norm vector."""


_active_tape: "Tape | None" = None


class Tape:
    """Append-only record of (output, inputs, backward closure) nodes."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False

    def record(self, out, inputs, backward_fn):
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: "Tensor"):
        """Seed d(loss)/d(loss)=1 and sweep the tape in reverse."""
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise ContractError("backward requires a finite loss")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g


class no_grad:
    """Disable tape recording (inference mode)."""

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = None
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operators; every differentiable op funnels through _apply below.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return mul(self, pow_scalar(_wrap(other), -1.0))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _active_tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply(a.data * b.data, (a, b), bw)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _apply(a.data ** p, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _apply(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        return (g.T,)

    return _apply(a.data.T, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _apply(a.data.reshape(shape), (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row lookup a[indices]; used for embeddings and row slicing."""
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _apply(a.data[idx], (a,), bw)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _apply(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return _apply(out_data, (a,), bw)


def log(a: Tensor) -> Tensor:
    """Guarded natural log: log(x + 1e-12)."""

    def bw(g):
        return (g / (a.data + LOG_GUARD),)

    return _apply(np.log(a.data + LOG_GUARD), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _apply(a.data * mask, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _apply(out_data, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _apply(out_data, (a,), bw)


def max_over_tokens(x: Tensor) -> Tensor:
    """Column-wise max pooling over the token axis of an N x d matrix.

    Gradient routes to the argmax row per column; ties go to the lowest index.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"max_over_tokens expects an N x d matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ContractError("max_over_tokens over an empty token set")
    arg = x.data.argmax(axis=0)
    cols = np.arange(x.shape[1])

    def bw(g):
        out = np.zeros_like(x.data)
        out[arg, cols] = g
        return (out,)

    return _apply(x.data[arg, cols], (x,), bw)


def norm(v: Tensor) -> Tensor:
    return pow_scalar(sum_(mul(v, v)), 0.5)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """cos(u, v) = u.v / (|u||v|); raises on zero-norm input."""
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity undefined for a zero-norm vector")
    return sum_(mul(u, v)) / (norm(u) * norm(v))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row of x over its last axis, then apply gain and bias."""
    d = x.shape[-1]
    if d < 2:
        raise ContractError(f"layer_norm needs a feature dimension >= 2, got {d}")
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = pow_scalar(add(var, Tensor(eps)), -0.5)
    return add(mul(mul(xc, inv), gain), bias)
