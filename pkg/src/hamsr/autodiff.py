"""Define-by-run reverse-mode automatic differentiation on numpy arrays.

The tape is rebuilt per forward pass, so variable-length token sequences and
variable-depth rollouts need no static graph. Only the primitives the
networks and integrator actually use are provided; in particular
``gelu_grad`` exists as a first-class primitive (with its own derivative) so
that Hamiltonian-style models can express their input-gradient chain as a
plain first-order graph.

``no_grad()`` disables recording globally; values are still computed by the
identical numpy expressions, which keeps fast evaluation passes numerically
identical to recorded ones.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ShapeMismatchError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """Array node of the tape. ``parents`` holds (tensor, vjp) pairs."""

    __slots__ = ("value", "grad", "parents", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents if _GRAD_ENABLED else ()

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self, seed=None):
        """Reverse accumulation from this node, seeding with ``seed`` (or 1)."""
        if seed is None:
            if self.value.ndim != 0:
                raise ShapeMismatchError("backward() without seed needs a scalar")
            seed = np.ones_like(self.value)
        order = _topo_order(self)
        grads = {id(self): np.asarray(seed, dtype=float)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.accumulate(g)
            for parent, vjp in node.parents:
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # Convenience operators (scalar-or-tensor second operands).
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
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(node):
    return node.requires_grad or bool(node.parents)


def _topo_order(root):
    """Reverse topological order (root first) by iterative DFS."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return list(reversed(order))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _record(value, *pairs):
    if not _GRAD_ENABLED:
        return Tensor(value)
    parents = tuple((t, fn) for t, fn in pairs if _needs(t))
    return Tensor(value, parents=parents)


def add(a, b):
    return _record(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b):
    return _record(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b):
    return _record(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    )


def div(a, b):
    inv = 1.0 / b.value
    out = a.value * inv
    return _record(
        out,
        (a, lambda g: _unbroadcast(g * inv, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * out * inv, b.value.shape)),
    )


def matmul(a, b):
    return _record(
        a.value @ b.value,
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    )


def matmul_bt(a, b):
    """a @ b.T with gradients (saves explicit transpose tensors)."""
    return _record(
        a.value @ b.value.T,
        (a, lambda g: g @ b.value),
        (b, lambda g: g.T @ a.value),
    )


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _record(out, (a, lambda g: g * out * (1.0 - out)))


def tanh(a):
    out = np.tanh(a.value)
    return _record(out, (a, lambda g: g * (1.0 - out * out)))


def exp(a):
    out = np.exp(a.value)
    return _record(out, (a, lambda g: g * out))


def log(a):
    return _record(np.log(a.value), (a, lambda g: g / a.value))


def sqrt(a):
    out = np.sqrt(a.value)
    return _record(out, (a, lambda g: g * (0.5 / out)))


def square(a):
    return _record(a.value * a.value, (a, lambda g: g * (2.0 * a.value)))


def absval(a):
    """|a|; subgradient sign(a) (zero at 0)."""
    return _record(np.abs(a.value), (a, lambda g: g * np.sign(a.value)))


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_parts(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 0.134145 * x * x)
    return u, t, du


def gelu_value(x):
    """tanh-form GeLU: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    _, t, _ = _gelu_parts(x)
    return 0.5 * x * (1.0 + t)


def gelu_grad_value(x):
    _, t, du = _gelu_parts(x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def gelu_grad2_value(x):
    _, t, du = _gelu_parts(x)
    sech2 = 1.0 - t * t
    ddu = _GELU_C * 0.26829 * x
    return sech2 * du + 0.5 * x * (sech2 * ddu - 2.0 * t * sech2 * du * du)


def gelu(a):
    return _record(gelu_value(a.value), (a, lambda g: g * gelu_grad_value(a.value)))


def gelu_grad(a):
    """GeLU'(x) as a primitive; differentiable once more (via GeLU'')."""
    return _record(
        gelu_grad_value(a.value), (a, lambda g: g * gelu_grad2_value(a.value))
    )


def tsum(a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return _record(out, (a, vjp))


def cols(a, index):
    """Select columns ``index`` (slice or index list) of a 2-d tensor."""
    idx = index if isinstance(index, slice) else np.asarray(index)
    out = a.value[:, idx].copy()

    def vjp(g):
        full = np.zeros_like(a.value)
        if isinstance(idx, slice):
            full[:, idx] = g
        else:
            np.add.at(full, (slice(None), idx), g)
        return full

    return _record(out, (a, vjp))


def scatter_cols(a, index, width):
    """Place a 2-d tensor into columns ``index`` of a (B, width) zero matrix."""
    idx = np.asarray(index)
    out = np.zeros((a.value.shape[0], width))
    out[:, idx] = a.value
    return _record(out, (a, lambda g: g[:, idx]))


def hstack(tensors):
    values = [t.value for t in tensors]
    out = np.concatenate(values, axis=1)
    pairs = []
    start = 0
    for t in tensors:
        w = t.value.shape[1]
        s = slice(start, start + w)
        pairs.append((t, lambda g, s=s: g[:, s]))
        start += w
    return _record(out, *pairs)


def broadcast_rows(a, n_rows):
    """(1, W) -> (n_rows, W); gradient sums the rows back."""
    out = np.broadcast_to(a.value, (n_rows,) + a.value.shape[1:]).copy()
    return _record(out, (a, lambda g: g.sum(axis=0, keepdims=True)))


def stop_grad(a):
    return Tensor(a.value)


def logsumexp_rows(a):
    """Row-wise log(sum(exp)); stable; returns (B, 1)."""
    m = a.value.max(axis=1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    return _record(out, (a, lambda g: g * (e / s)))


def finite_difference_grads(fn, params, h=1e-5):
    """Central finite differences of scalar ``fn()`` wrt Tensor list ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads
