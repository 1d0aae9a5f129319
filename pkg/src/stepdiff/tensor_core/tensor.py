"""Dense float64 tensors with a reverse-mode tape.

Operations are recorded only while a :class:`Tape` is active, so inference
paths (sampling, evaluation) run at plain numpy speed.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_ACTIVE: list["Tape"] = []


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` once on the scalar loss; leaf tensors with
    ``requires_grad`` receive ``.grad``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, out: Tensor, parents: tuple, vjp) -> None:
        self.nodes.append(_Node(out, parents, vjp))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self.consumed:
            raise UsageError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in produced:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self.nodes.clear()
        self.consumed = True
        return {k: grads[k] for k in leaves}


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def _tape():
    return _ACTIVE[-1] if _ACTIVE else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp) -> Tensor:
    tape = _tape()
    needs = tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _make(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


# --- shape / reduction -----------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), vjp)


def concat(xs: list, axis: int = -1) -> Tensor:
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), vjp)


# --- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp)


def dense_forward(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W + b`` over the last axis of ``x``."""
    x = _wrap(x)
    if W.ndim != 2:
        raise DimensionError(f"weight must be rank 2, got shape {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"x last axis ({x.shape[-1]}) != W axis 0 ({W.shape[0]})")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"bias shape {b.shape} != W axis 1 ({W.shape[1]},)")
    xd, Wd = x.data, W.data
    y = xd @ Wd
    if b is not None:
        y = y + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T
        gW = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gW, gb

    return _make(y, (x, W, b), vjp)


# --- normalization / attention --------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable, True = keep) excludes entries."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -1e300)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        gg = g.reshape(-1, g.shape[-1])
        dgamma = (gg * xhat.reshape(gg.shape)).sum(axis=0)
        dbeta = gg.sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(y, (x, gamma, beta), vjp)


def embedding(weight: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = weight.shape[0]

    def vjp(g):
        out = np.zeros(weight.shape)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"embedding index out of range [0, {n})")
    return _make(weight.data[idx], (weight,), vjp)


def attention_forward(q: Tensor, k: Tensor, v: Tensor, heads: int,
                      key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over axis -2.

    ``q, k, v`` have shape ``(..., n, d)``; ``key_mask`` of shape ``(..., n)``
    marks valid key positions (True). Heads are concatenated back to ``d``.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model width {d} not divisible by heads={heads}")
    if q.shape[-2] < 1:
        raise DimensionError("attention needs at least one position")
    if k.shape != v.shape or k.shape[-1] != d:
        raise DimensionError(f"shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(a):
        return np.moveaxis(a.reshape(a.shape[:-1] + (heads, dh)), -2, -3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = (qh @ np.swapaxes(kh, -1, -2)) * scale
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        s = np.where(km, s, -1e300)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    oh = p @ vh
    out = np.moveaxis(oh, -3, -2).reshape(q.shape)

    def merge_grad(gh, shape):
        return np.moveaxis(gh, -3, -2).reshape(shape)

    def vjp(g):
        gh = split(g)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh
        return merge_grad(gq, q.shape), merge_grad(gk, k.shape), merge_grad(gv, v.shape)

    return _make(out, (q, k, v), vjp)


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
