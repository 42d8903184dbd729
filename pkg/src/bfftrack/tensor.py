"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a vector-Jacobian closure on the
produced tensor; ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates gradients additively into ``.grad``.
Values are always C-contiguous float64 arrays, which keeps gradient checks
tight and results bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operation is undefined for the given values (e.g. fully masked row)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(values):
    return np.ascontiguousarray(values, dtype=np.float64)


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad=False):
        self.values = _as_array(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every grad-enabled node.

        ``seed`` defaults to 1.0 and requires a single-element tensor;
        repeated calls without ``zero_grad`` add up.
        """
        if seed is None:
            if self.values.size != 1:
                raise ShapeError(f"backward() without seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.values)
        else:
            seed = _as_array(seed)
            if seed.shape != self.values.shape:
                raise ShapeError(f"seed shape {seed.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        flow = {id(self): seed}
        for node in reversed(order):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in flow:
                    flow[id(parent)] = flow[id(parent)] + pg
                else:
                    flow[id(parent)] = pg

    # operator sugar; non-Tensor operands become constants
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(values, parents, vjp):
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.values + b.values
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.values - b.values
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.values * b.values
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
    )


def scale(a, c):
    a = _wrap(a)
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product with batching over leading dimensions (numpy semantics)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def transpose_last(a):
    """Swap the last two axes."""
    a = _wrap(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last needs >=2-d operand, got {a.shape}")
    return _make(np.swapaxes(a.values, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    a = _wrap(a)
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, key):
    a = _wrap(a)
    out = a.values[key]

    def vjp(g):
        full = np.zeros_like(a.values)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    extents = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(extents)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tensors, vjp)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.values.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a):
    a = _wrap(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    a = _wrap(a)
    y = np.tanh(a.values)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = _wrap(a)
    # split by sign to avoid exp overflow
    x = a.values
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax_rows(a):
    """Row-wise softmax over the last axis with max-subtraction.

    Entries equal to -inf are treated as masked and map to exactly 0.
    A row that is entirely -inf has no valid distribution and is rejected.
    """
    a = _wrap(a)
    if a.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty last axis")
    m = a.values.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DomainError("softmax_rows: a row is entirely masked to -inf")
    e = np.exp(a.values - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def vjp(g):
        dxhat = g * gain.values
        # standard layer-norm backward, derived once and reused
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), vjp)


def dropout(x, p, rng=None, train=False):
    """Zero entries with probability ``p`` and rescale survivors by 1/(1-p).

    Identity at evaluation time and for p == 0 (no rng draw in either case,
    so the caller's random stream is unaffected).
    """
    x = _wrap(x)
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    factor = keep / (1.0 - p)
    return _make(x.values * factor, (x,), lambda g: (g * factor,))


def grad_check(f, x, h=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per entry is
    |a - n| / max(1, |a|, |n|).
    """
    x0 = Tensor(x.values.copy(), requires_grad=True)
    out = f(x0)
    if out.values.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.values).all():
        raise DomainError("grad_check: f(x) is not finite")
    out.backward()
    analytic = x0.grad.copy()

    numeric = np.zeros_like(x0.values)
    flat = x0.values.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0.values)).values.reshape(-1)[0])
        flat[i] = orig - h
        fm = float(f(Tensor(x0.values)).values.reshape(-1)[0])
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
