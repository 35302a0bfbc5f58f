"""Dense layers, Glorot initialisation, Adam with decoupled weight decay and a
reduce-on-plateau learning-rate scheduler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteGradient


def glorot_uniform(fan_out, fan_in, rng):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_params(shape, seed):
    """Glorot-uniform weights of ``shape=(out, in)`` from an integer seed."""
    rng = np.random.default_rng(seed)
    return glorot_uniform(shape[0], shape[1], rng)


class ParamStore:
    """Ordered name -> array mapping shared by layers of one model."""

    def __init__(self):
        self.arrays = {}

    def add(self, name, value):
        if name in self.arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        self.arrays[name] = np.asarray(value, dtype=np.float64)
        return name

    def count(self):
        return int(sum(a.size for a in self.arrays.values()))

    def bind(self, tape):
        """Register every array on ``tape`` and return name -> Tensor."""
        return {k: tape.param(k, v) for k, v in self.arrays.items()}


@dataclass
class Dense:
    name: str
    n_in: int
    n_out: int
    activation: str = "identity"
    bias: bool = True

    def init(self, store, rng):
        store.add(f"{self.name}.W", glorot_uniform(self.n_out, self.n_in, rng))
        if self.bias:
            store.add(f"{self.name}.b", np.zeros(self.n_out))

    def n_params(self):
        return self.n_out * self.n_in + (self.n_out if self.bias else 0)

    def __call__(self, P, x):
        y = ad.linear(x, P[f"{self.name}.W"], P.get(f"{self.name}.b") if self.bias else None)
        if self.activation != "identity":
            y = ad.activation(y, self.activation)
        return y

    def jet(self, P, x):
        y = x.linear(P[f"{self.name}.W"], P.get(f"{self.name}.b") if self.bias else None)
        if self.activation != "identity":
            y = y.apply(self.activation)
        return y


class MLP:
    """Stack of dense layers; hidden layers use ``activation``, the last is linear."""

    def __init__(self, name, sizes, activation):
        self.layers = [
            Dense(f"{name}.{i}", sizes[i], sizes[i + 1],
                  activation if i < len(sizes) - 2 else "identity")
            for i in range(len(sizes) - 1)
        ]

    def init(self, store, rng):
        for layer in self.layers:
            layer.init(store, rng)

    def n_params(self):
        return sum(layer.n_params() for layer in self.layers)

    def __call__(self, P, x):
        for layer in self.layers:
            x = layer(P, x)
        return x

    def jet(self, P, x):
        for layer in self.layers:
            x = layer.jet(P, x)
        return x


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(state: AdamState, params: dict, grads: dict):
    """In-place bias-corrected Adam update with decoupled weight decay.

    All gradients are checked before any parameter moves, so a non-finite
    gradient leaves both parameters and state untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class PlateauScheduler:
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-7
    threshold: float = 1e-8
    best: float = np.inf
    stall: int = 0

    def step(self, state: AdamState, val_loss):
        """Feed one epoch's validation loss; returns the (possibly reduced) lr."""
        if val_loss < self.best - self.threshold:
            self.best = float(val_loss)
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                state.lr = min(state.lr, max(state.lr * self.factor, self.min_lr))
                self.stall = 0
        return state.lr
