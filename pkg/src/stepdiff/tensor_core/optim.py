from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, UsageError


class ParamStore:
    """Named trainable parameters plus Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.params.items():
            arr = state[prefix + k]
            if arr.shape != p.shape:
                raise UsageError(f"{prefix + k}: checkpoint shape {arr.shape} != parameter {p.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names=None) -> ParamStore:
    """In-place Adam update with bias correction; returns ``store``."""
    names = store.names() if names is None else list(names)
    missing = [n for n in names if n not in grads]
    if missing:
        raise UsageError(f"missing gradients for {missing[:3]}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for n in names:
        g = grads[n]
        m = store.m[n]
        v = store.v[n]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p = store.params[n]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store
