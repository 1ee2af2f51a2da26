"""Dense networks and optimizers on top of the tape.

Two architectures are provided: the deep GeLU MLP used by the
structure-enforcing prediction networks (8 hidden layers of 128 by default)
and a multi-layer LSTM with trainable initial state used by the expression
sampler (2 layers of 250 by default).

The MLP exposes ``forward_with_input_grad``: the input gradient is built out
of taped primitives (with ``gelu_grad`` as a first-class op), so a loss that
consumes dT/dp and dV/dq from these networks stays first-order
differentiable with respect to the weights.

Weight matrices initialize uniform in +-sqrt(6/(fan_in+fan_out)); biases and
LSTM initial states start at zero (the initial states are parameters and
train thereafter).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatchError

CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameter tensors with gradient buffers."""

    def __init__(self):
        self.params = {}

    def add(self, name, value):
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=float), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def tensors(self):
        return [self.params[name] for name in self.names()]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_parameters(self):
        return sum(t.value.size for t in self.params.values())

    def state_dict(self):
        return {name: self.params[name].value.copy() for name in self.names()}

    def load_state(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter names mismatch: {sorted(missing)}")
        for name, value in state.items():
            tensor = self.params[name]
            value = np.asarray(value, dtype=float)
            if value.shape != tensor.value.shape:
                raise ShapeMismatchError(
                    f"{name}: expected {tensor.value.shape}, got {value.shape}"
                )
            tensor.value = value.copy()
            tensor.grad = None

    def clone(self):
        other = ParamStore()
        for name in self.names():
            other.add(name, self.params[name].value.copy())
        return other


def save_params(store, path):
    np.savez(
        path,
        __format_version__=np.array([CHECKPOINT_VERSION]),
        **{name: store.params[name].value for name in store.names()},
    )


def load_params(store, path):
    with np.load(path) as data:
        version = int(data["__format_version__"][0])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        store.load_state({k: data[k] for k in data.files if k != "__format_version__"})


def xavier_uniform(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# MLP


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int = 1
    hidden_dim: int = 128
    depth: int = 8  # hidden layers

    def __post_init__(self):
        if self.depth < 1 or min(self.input_dim, self.output_dim, self.hidden_dim) < 1:
            raise ConfigError("MLP dimensions must be positive, depth >= 1")


class Mlp:
    def __init__(self, cfg, store, prefix, rng):
        self.cfg = cfg
        self.prefix = prefix
        dims = [cfg.input_dim] + [cfg.hidden_dim] * cfg.depth + [cfg.output_dim]
        self.weights = []
        self.biases = []
        for l in range(len(dims) - 1):
            w = store.add(f"{prefix}.W{l}", xavier_uniform(rng, (dims[l], dims[l + 1])))
            b = store.add(f"{prefix}.b{l}", np.zeros(dims[l + 1]))
            self.weights.append(w)
            self.biases.append(b)

    def _check(self, x):
        if x.value.ndim != 2 or x.value.shape[1] != self.cfg.input_dim:
            raise ShapeMismatchError(
                f"expected (B, {self.cfg.input_dim}) input, got {x.value.shape}"
            )

    def forward(self, x):
        self._check(x)
        z = x
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = ad.matmul(z, w) + b
            if l != last:
                z = ad.gelu(z)
        return z

    def forward_with_input_grad(self, x):
        """(y, dy/dx) for scalar-output MLPs, both on the tape."""
        if self.cfg.output_dim != 1:
            raise ShapeMismatchError("input gradients require output_dim == 1")
        self._check(x)
        z = x
        pre = []
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = ad.matmul(z, w) + b
            if l != last:
                pre.append(a)
                z = ad.gelu(a)
            else:
                y = a
        B = x.value.shape[0]
        ones = Tensor(np.ones((B, 1)))
        u = ad.matmul_bt(ones, self.weights[last])  # dy/dz_{L-1}
        for l in range(last - 1, -1, -1):
            u = ad.mul(u, ad.gelu_grad(pre[l]))
            u = ad.matmul_bt(u, self.weights[l])
        return y, u


# ---------------------------------------------------------------------------
# LSTM


@dataclass(frozen=True)
class LstmConfig:
    input_dim: int
    output_dim: int
    hidden_dim: int = 250
    layers: int = 2

    def __post_init__(self):
        if min(self.input_dim, self.output_dim, self.hidden_dim, self.layers) < 1:
            raise ConfigError("LSTM dimensions must be positive")


class Lstm:
    """Multi-layer LSTM with trainable initial state and a logit head."""

    def __init__(self, cfg, store, prefix, rng):
        self.cfg = cfg
        self.prefix = prefix
        H = cfg.hidden_dim
        self.gates = []
        for l in range(cfg.layers):
            in_dim = cfg.input_dim if l == 0 else H
            wx = store.add(f"{prefix}.Wx{l}", xavier_uniform(rng, (in_dim, 4 * H)))
            wh = store.add(f"{prefix}.Wh{l}", xavier_uniform(rng, (H, 4 * H)))
            b = store.add(f"{prefix}.b{l}", np.zeros(4 * H))
            h0 = store.add(f"{prefix}.h0{l}", np.zeros((1, H)))
            c0 = store.add(f"{prefix}.c0{l}", np.zeros((1, H)))
            self.gates.append((wx, wh, b, h0, c0))
        self.w_out = store.add(f"{prefix}.Wo", xavier_uniform(rng, (H, cfg.output_dim)))
        self.b_out = store.add(f"{prefix}.bo", np.zeros(cfg.output_dim))

    def initial_state(self, batch):
        return [
            (ad.broadcast_rows(h0, batch), ad.broadcast_rows(c0, batch))
            for (_, _, _, h0, c0) in self.gates
        ]

    def step(self, x, state):
        """One step: input (B, input_dim), returns (logits, new state)."""
        if x.value.shape[1] != self.cfg.input_dim:
            raise ShapeMismatchError(
                f"expected (B, {self.cfg.input_dim}) input, got {x.value.shape}"
            )
        H = self.cfg.hidden_dim
        new_state = []
        inp = x
        for (wx, wh, b, _, _), (h, c) in zip(self.gates, state):
            z = ad.matmul(inp, wx) + ad.matmul(h, wh) + b
            i = ad.sigmoid(ad.cols(z, slice(0, H)))
            f = ad.sigmoid(ad.cols(z, slice(H, 2 * H)))
            g = ad.tanh(ad.cols(z, slice(2 * H, 3 * H)))
            o = ad.sigmoid(ad.cols(z, slice(3 * H, 4 * H)))
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            new_state.append((h, c))
            inp = h
        logits = ad.matmul(inp, self.w_out) + self.b_out
        return logits, new_state


# ---------------------------------------------------------------------------
# Optimizers

def _param_pairs(params):
    """Normalize to [(value, grad)] over Tensors with populated grads."""
    out = []
    for p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        out.append((p, g))
    return out


class Adam:
    def __init__(self, lr=0.0005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        with np.errstate(all="ignore"):
            for i, (p, g) in enumerate(_param_pairs(params)):
                m = self._m.get(i)
                if m is None:
                    m = self._m[i] = np.zeros_like(p.value)
                    self._v[i] = np.zeros_like(p.value)
                v = self._v[i]
                m += (1.0 - b1) * (g - m)
                v += (1.0 - b2) * (g * g - v)
                mhat = m / (1.0 - b1**self.t)
                vhat = v / (1.0 - b2**self.t)
                p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class RmsProp:
    def __init__(self, lr=0.5, decay=0.9, eps=1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self._acc = {}

    def step(self, params):
        d = self.decay
        with np.errstate(all="ignore"):
            for i, (p, g) in enumerate(_param_pairs(params)):
                acc = self._acc.get(i)
                if acc is None:
                    acc = self._acc[i] = np.zeros_like(p.value)
                acc += (1.0 - d) * (g * g - acc)
                p.value = p.value - self.lr * g / (np.sqrt(acc) + self.eps)


def adam_step(optimizer, params):
    optimizer.step(params)


def rmsprop_step(optimizer, params):
    optimizer.step(params)
