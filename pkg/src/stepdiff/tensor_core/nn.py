"""Small layer library on top of the tape: FNN, layer norm, transformer encoder."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .optim import ParamStore


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
        self.W = store.add(f"{name}.W", w)
        self.b = store.add(f"{name}.b", np.zeros(n_out))

    def __call__(self, x):
        return T.dense_forward(x, self.W, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


_ACTS = {"tanh": T.tanh, "relu": T.relu, "gelu": T.gelu, "silu": T.silu}


class FNN:
    """Fully connected stack; activation between layers, linear output."""

    def __init__(self, store: ParamStore, name: str, sizes: list[int],
                 rng: np.random.Generator, activation: str = "tanh"):
        self.layers = [Dense(store, f"{name}.{i}", a, b, rng)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.act = _ACTS[activation]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


class TransformerLayer:
    """Post-norm encoder layer: self-attention then a GELU feed-forward."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator, ff_dim: int = 64):
        if dim % heads:
            raise T.ConfigurationError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = Dense(store, f"{name}.qkv", dim, 3 * dim, rng)
        self.proj = Dense(store, f"{name}.proj", dim, dim, rng)
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.ff1 = Dense(store, f"{name}.ff1", dim, ff_dim, rng)
        self.ff2 = Dense(store, f"{name}.ff2", ff_dim, dim, rng)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.dim = dim

    def __call__(self, x, key_mask=None):
        d = self.dim
        qkv = self.qkv(x)
        q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        a = self.proj(T.attention_forward(q, k, v, self.heads, key_mask))
        x = self.norm1(x + a)
        f = self.ff2(T.gelu(self.ff1(x)))
        return self.norm2(x + f)


def sinusoidal(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sine/cosine table of shape ``positions.shape + (dim,)``."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
