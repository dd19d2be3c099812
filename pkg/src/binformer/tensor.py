"""Minimal dense-tensor engine with reverse-mode autodiff.

Tensors wrap a numpy array plus an optional gradient buffer. Forward ops
record a backward closure on the fly (define-by-run); calling
:func:`backward` on a scalar walks the tape in reverse topological order
and accumulates gradients additively into each leaf that requires them.

Model runs use float32; gradient checking switches the whole graph to
float64 simply by feeding float64 parameters (every op inherits the
operand dtype).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    ContractError,
    NoLossPositionsError,
    NumericError,
    ShapeError,
)

# When True, every op output is checked for NaN/Inf and raises NumericError.
DEBUG_CHECKS = False

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A dense array node in the autodiff graph.

    ``data`` is immutable by convention once the node is created (the
    optimizer mutates parameter data in place between forward passes,
    never during one). ``grad`` is lazily allocated on first accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _check_finite(arr, where):
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value detected in {where}")


def _result(data, parents, backward_fn):
    _check_finite(data, "op output")
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------


def add(a, b):
    """Elementwise add; broadcasting over leading axes only."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), bwd)


def scale(a, s):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _result(a.data * s, (a,), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ShapeError(f"matmul: need >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape} @ {b.shape})"
        )
    data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _result(a.data.reshape(shape), (a,), bwd)


def take_rows(a, n):
    """First ``n`` rows of a 2-D tensor (positional-table slice)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D, got {a.shape}")
    if n > a.shape[0]:
        raise ShapeError(f"take_rows: {n} rows requested from {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:n] = g
        return (full,)

    return _result(a.data[:n].copy(), (a,), bwd)


def gelu(a):
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _result(data, (a,), bwd)


def softmax_lastdim(a, mask=None):
    """Softmax over the last axis.

    ``mask`` is an optional boolean array broadcastable to ``a.shape``;
    False entries get exactly zero probability and zero gradient. Each
    row must keep at least one True entry.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(p * g, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _result(p, (a,), bwd)


def layernorm_lastdim(a, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with affine parameters."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layernorm: affine params must have shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gd = g * gain.data
        dx = inv * (
            gd
            - gd.mean(axis=-1, keepdims=True)
            - xhat * (gd * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _result(data, (a, gain, bias), bwd)


def mean_axis(a, axis):
    a = as_tensor(a)
    n = a.shape[axis]
    data = a.data.mean(axis=axis)

    def bwd(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _result(data, (a,), bwd)


def sum_all(a):
    a = as_tensor(a)

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bwd)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "softmax-lastdim": softmax_lastdim,
    "layernorm-lastdim": layernorm_lastdim,
    "gelu": gelu,
    # Adding a positional table to a batch of hidden states is an add that
    # broadcasts over the leading batch axis.
    "embedding-add": add,
}


def primitive_forward(kind, *operands):
    """Dispatch a named forward primitive; records the op on the tape."""
    if kind not in _PRIMITIVES:
        raise ShapeError(f"unknown primitive kind {kind!r}")
    for op in operands:
        if isinstance(op, Tensor):
            _check_finite(op.data, f"{kind} input")
    return _PRIMITIVES[kind](*operands)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def cross_entropy_from_logits(logits, targets, include=None):
    """Mean negative log-softmax-probability of the target class.

    Only positions where ``include`` is True enter the mean. Stabilized by
    max-subtraction. ``targets`` and ``include`` are plain arrays shaped
    like ``logits`` minus the class axis.
    """
    logits = as_tensor(logits)
    c = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    if include is None:
        include = np.ones(targets.shape, dtype=bool)
    include = np.asarray(include, dtype=bool)
    if include.shape != targets.shape:
        raise ShapeError("include mask shape does not match targets")
    count = int(include.sum())
    if count == 0:
        raise NoLossPositionsError("no loss positions: include mask is empty")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"target class out of range [0, {c})")

    x = logits.data
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    sums = np.sum(e, axis=-1, keepdims=True)
    lse = (np.log(sums) + m)[..., 0]
    tlogit = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    nll = lse - tlogit
    loss = np.asarray((nll * include).sum() / count, dtype=x.dtype)

    def bwd(g):
        probs = e / sums
        grad = probs.copy()
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        grad *= include[..., None]
        grad *= float(g) / count
        return (grad.astype(x.dtype),)

    return _result(loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Repeated calls accumulate additively; callers zero grads between steps.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward requires a scalar Tensor loss")

    # Iterative post-order DFS (graphs can be deep for long sequences).
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # Leaf: accumulate into the persistent grad buffer.
            node.accumulate_grad(g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if p._backward is None:
                node_g = pg if pg.shape == p.data.shape else np.broadcast_to(pg, p.data.shape)
                p.accumulate_grad(node_g)
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
