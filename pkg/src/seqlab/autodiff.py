"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced; calling
``backward`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every reachable leaf. Only the
operations needed by the models and losses in this package are provided.
All computation is plain numpy, so results are deterministic for a fixed
input and dtype.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An ndarray plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from this scalar; grads land on leaves."""
        if self.data.size != 1:
            raise UsageError("backward requires a scalar tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)
                # interior grads are not retained
                if not node.requires_grad:
                    node.grad = None

    # operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


class UsageError(RuntimeError):
    """Raised when the tape is driven out of contract (e.g. backward on a vector)."""


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def astensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.data.dtype != dtype:
            return cast(x, dtype)
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(isinstance(p, Tensor) and (p.requires_grad or p._parents) for p in parents):
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce_pair(a, b):
    """Wrap operands; python scalars adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return astensor(a), astensor(b)


# elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data / b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def square(a):
    a = astensor(a)
    data = a.data * a.data

    def backward(g):
        a.accumulate_grad(g * (2.0 * a.data))

    return _make(data, (a,), backward)


def exp(a):
    a = astensor(a)
    data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * data)

    return _make(data, (a,), backward)


def log(a):
    a = astensor(a)
    data = np.log(a.data)

    def backward(g):
        a.accumulate_grad(g / a.data)

    return _make(data, (a,), backward)


def tanh(a):
    a = astensor(a)
    data = np.tanh(a.data)

    def backward(g):
        a.accumulate_grad(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def _sigmoid(x):
    # branch-stable: never exponentiates a large positive argument
    x = np.asarray(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out[0] if scalar else out


def sigmoid(a):
    a = astensor(a)
    data = _sigmoid(np.asarray(a.data, dtype=a.data.dtype))

    def backward(g):
        a.accumulate_grad(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def _softplus(x):
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    a = astensor(a)
    data = _softplus(a.data)

    def backward(g):
        a.accumulate_grad(g * _sigmoid(a.data))

    return _make(data, (a,), backward)


def logsigmoid(a):
    a = astensor(a)
    data = -_softplus(-a.data)

    def backward(g):
        a.accumulate_grad(g * _sigmoid(-a.data))

    return _make(data, (a,), backward)


def relu(a):
    a = astensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0))

    return _make(data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu(a):
    """tanh-form gaussian error linear unit, composed from primitives."""
    a = astensor(a)
    inner = mul(add(a, mul(mul(square(a), a), 0.044715)), _GELU_C)
    return mul(mul(a, add(tanh(inner), 1.0)), 0.5)


def cast(a, dtype):
    a = astensor(a)
    src = a.data.dtype
    data = a.data.astype(dtype)

    def backward(g):
        a.accumulate_grad(g.astype(src))

    return _make(data, (a,), backward)


# reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = astensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    s = np.exp(shifted).sum(axis=axis, keepdims=True)
    data = (m + np.log(s))
    soft = np.exp(shifted) / s
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        a.accumulate_grad(gk * soft)

    return _make(data, (a,), backward)


def softmax(a, axis=-1):
    a = astensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(data * (g - dot))

    return _make(data, (a,), backward)


def log_softmax(a, axis=-1):
    a = astensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        gsum = g.sum(axis=axis, keepdims=True)
        a.accumulate_grad(g - soft * gsum)

    return _make(data, (a,), backward)


# shape and indexing ----------------------------------------------------


def reshape(a, shape):
    a = astensor(a)
    data = a.data.reshape(shape)
    src = a.data.shape

    def backward(g):
        a.accumulate_grad(g.reshape(src))

    return _make(data, (a,), backward)


def transpose(a, axes):
    a = astensor(a)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        a.accumulate_grad(np.transpose(g, inv))

    return _make(data, (a,), backward)


def _is_fancy(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, key):
    a = astensor(a)
    data = a.data[key]
    fancy = _is_fancy(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] += g
        a.accumulate_grad(full)

    return _make(data, (a,), backward)


def take(table, ids):
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    table = astensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table.accumulate_grad(full)

    return _make(data, (table,), backward)


def take_along_last(a, idx):
    """Pick one entry per row along the last axis: out[...] = a[..., idx[...]]."""
    a = astensor(a)
    idx = np.asarray(idx)
    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        a.accumulate_grad(full)

    return _make(data, (a,), backward)


def stack(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            t.accumulate_grad(np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), backward)


# linear algebra --------------------------------------------------------


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if a.data.ndim >= 2:
            ga = _unbroadcast(ga, a.data.shape)
        if b.data.ndim >= 2:
            gb = _unbroadcast(gb, b.data.shape)
        a.accumulate_grad(ga)
        b.accumulate_grad(gb)

    return _make(data, (a, b), backward)


def candidate_dot(h, e):
    """Per-slot inner products: out[..., k] = h[..., :] . e[..., k, :]."""
    h, e = astensor(h), astensor(e)
    data = np.einsum("...d,...kd->...k", h.data, e.data)

    def backward(g):
        h.accumulate_grad(np.einsum("...k,...kd->...d", g, e.data))
        e.accumulate_grad(np.einsum("...k,...d->...kd", g, h.data))

    return _make(data, (h, e), backward)


def layer_norm(x, gain, bias, eps=1e-8):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        sum_axes = tuple(range(g.ndim - 1))
        bias.accumulate_grad(g.sum(axis=sum_axes))
        gain.accumulate_grad((g * xhat).sum(axis=sum_axes))
        gx = g * gain.data
        dot = (gx * xhat).mean(axis=-1, keepdims=True)
        mean_gx = gx.mean(axis=-1, keepdims=True)
        x.accumulate_grad(inv * (gx - mean_gx - xhat * dot))

    return _make(data, (x, gain, bias), backward)


def dropout(x, rate, rng):
    """Inverted dropout; identity when rate is 0."""
    x = astensor(x)
    if rate <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate)
    scale = 1.0 / (1.0 - rate)
    factor = keep.astype(x.data.dtype) * np.asarray(scale, dtype=x.data.dtype)
    return mul(x, Tensor(factor))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)
