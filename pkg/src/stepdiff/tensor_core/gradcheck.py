from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a-n|| / max(||a|| + ||n||, floor)`` over the probed coordinates."""
    denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / denom


def check_gradients(fn, tensors: list[Tensor], h: float = 1e-5, n_probe: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of scalar ``fn()`` to central differences.

    ``fn`` must rebuild the forward pass from the current ``tensors``.
    ``n_probe`` limits how many coordinates per tensor are probed (random subset).
    Returns the worst relative error over all probed coordinates.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if n_probe is not None and flat.size > n_probe:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, n_probe, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            num[j] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], num))
    return worst
