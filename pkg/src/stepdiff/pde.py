"""Discrete convection-diffusion transport on the cell grid.

One slice step is ``V[l+1] = B V[l] + C S`` with ``B = exp(dtau A)`` and
``C = dtau * phi1(dtau A)``, where ``A`` is the five-point stencil below and
``phi1(z) = (e^z - 1)/z``. Cells are flattened row-major, index ``x*Y + y``.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grid_data import MaskedField

log = logging.getLogger(__name__)


class PdeConfigError(ValueError):
    pass


class NoObservations(ValueError):
    pass


@dataclass
class PdeParams:
    K: float = 0.0
    P_x: np.ndarray | float = 0.0
    P_y: np.ndarray | float = 0.0
    n: float = 500.0
    dtau: float = 3600.0
    boundary: str = "absorbing"

    def __post_init__(self):
        if not (self.n > 0 and self.dtau > 0 and self.K >= 0):
            raise PdeConfigError(f"need n > 0, dtau > 0, K >= 0 (got n={self.n}, dtau={self.dtau}, K={self.K})")
        if self.boundary != "absorbing":
            raise PdeConfigError(f"unsupported boundary {self.boundary!r}")

    def winds(self, X: int, Y: int) -> tuple[np.ndarray, np.ndarray]:
        px = np.broadcast_to(np.asarray(self.P_x, dtype=np.float64), (X, Y)).copy()
        py = np.broadcast_to(np.asarray(self.P_y, dtype=np.float64), (X, Y)).copy()
        return px, py

    def to_json(self) -> dict:
        def enc(p):
            a = np.asarray(p, dtype=float)
            return float(a) if a.ndim == 0 else a.tolist()
        return {"K": float(self.K), "P_x": enc(self.P_x), "P_y": enc(self.P_y),
                "n": float(self.n), "dtau": float(self.dtau), "boundary": self.boundary}

    @classmethod
    def from_json(cls, d: dict) -> "PdeParams":
        return cls(K=d["K"], P_x=np.asarray(d["P_x"], float), P_y=np.asarray(d["P_y"], float),
                   n=d["n"], dtau=d["dtau"], boundary=d.get("boundary", "absorbing"))


@dataclass
class PdeOperator:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    params: PdeParams
    shape: tuple[int, int] = field(default=(1, 1))

    def records(self, prefix: str = "pde.") -> dict[str, np.ndarray]:
        return {prefix + "A": self.A, prefix + "B": self.B, prefix + "C": self.C}


@dataclass
class SourceEstimate:
    S: np.ndarray
    window_used: int


def stencil(params: PdeParams, X: int, Y: int) -> np.ndarray:
    """Assemble the (XY x XY) generator with absorbing edges."""
    px, py = params.winds(X, Y)
    K, n = float(params.K), float(params.n)
    if not (np.all(np.isfinite(px)) and np.all(np.isfinite(py)) and math.isfinite(K)):
        raise PdeConfigError("non-finite PDE parameters")
    d = K / n**2
    A = np.zeros((X * Y, X * Y))
    for x in range(X):
        for y in range(Y):
            i = x * Y + y
            if y + 1 < Y:
                A[i, i + 1] = d - py[x, y] / n
            if x + 1 < X:
                A[i, i + Y] = d - px[x, y] / n
            if y - 1 >= 0:
                A[i, i - 1] = d
            if x - 1 >= 0:
                A[i, i - Y] = d
            # off-grid wind references take the nearest in-grid value
            px_next = px[min(x + 1, X - 1), y]
            py_next = py[x, min(y + 1, Y - 1)]
            A[i, i] = -4 * d - (px_next - 2 * px[x, y] + py_next - 2 * py[x, y]) / n
    return A


def _taylor_exp_phi1(Z: np.ndarray, tol: float = 1e-18, max_terms: int = 40):
    """exp(Z) and phi1(Z) by their power series (for small ||Z||)."""
    I = np.eye(Z.shape[0])
    E = I.copy()
    P = I.copy()
    term = I.copy()
    for k in range(1, max_terms):
        term = term @ Z / k
        E += term
        P += term / (k + 1)
        if np.abs(term).max() < tol:
            break
    return E, P


def matrix_exponential(M: np.ndarray, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """``(exp(scale*M), scale*phi1(scale*M))`` by scaling and squaring.

    The squaring uses ``exp(2Z) = exp(Z)^2`` and
    ``phi1(2Z) = (exp(Z) + I) phi1(Z) / 2``, so no inverse of ``M`` is formed.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix_exponential needs a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise PdeConfigError("non-finite matrix")
    Z = scale * M
    norm = np.abs(Z).sum(axis=0).max() if Z.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    E, P = _taylor_exp_phi1(Z / 2.0**s)
    I = np.eye(Z.shape[0])
    for _ in range(s):
        P = 0.5 * (E + I) @ P
        E = E @ E
    return E, scale * P


def build_transition(params: PdeParams, X: int, Y: int) -> PdeOperator:
    A = stencil(params, X, Y)
    B, C = matrix_exponential(A, params.dtau)
    return PdeOperator(A, B, C, params, (X, Y))


def evolve(op: PdeOperator, v: np.ndarray, s: np.ndarray | float = 0.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != op.shape:
        raise ValueError(f"slice shape {v.shape} != operator grid {op.shape}")
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), op.shape)
    return (op.B @ v.reshape(-1) + op.C @ s.reshape(-1)).reshape(op.shape)


def evolve_batch(B: np.ndarray, slices: np.ndarray) -> np.ndarray:
    """Apply ``B`` to each (X, Y) slice of ``slices`` (..., X, Y), no source."""
    shp = slices.shape
    flat = slices.reshape(-1, shp[-2] * shp[-1])
    return (flat @ B.T).reshape(shp)


def fill_slices(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slice-mean infill; empty slices carry the previous filled slice.

    Returns the filled stack and a flag per slice telling whether it is usable
    (False only for leading empty slices).
    """
    out = np.zeros_like(values, dtype=np.float64)
    ok = np.zeros(len(values), dtype=bool)
    prev = None
    for l in range(len(values)):
        m = mask[l]
        if m.any():
            out[l] = np.where(m, values[l], values[l][m].mean())
            prev = out[l]
            ok[l] = True
        elif prev is not None:
            out[l] = prev
            ok[l] = True
    return out, ok


def estimate_source(values: np.ndarray, mask: np.ndarray, op: PdeOperator, window: int = 6,
                    ridge: float = 1e-8) -> SourceEstimate:
    """Least-squares constant source over the trailing ``window`` transitions.

    Residual rows are the cells observed at both ends of a transition; the
    start slice is slice-mean filled before applying ``B``.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    XY = op.B.shape[0]
    filled, ok = fill_slices(values, mask)
    L = len(values)
    rows_C, rows_r = [], []
    used = 0
    for l in range(max(0, L - 1 - window), L - 1):
        joint = (mask[l] & mask[l + 1]).reshape(-1)
        if not (ok[l] and mask[l].any() and joint.any()):
            continue
        pred = op.B @ filled[l].reshape(-1)
        rows_C.append(op.C[joint])
        rows_r.append(values[l + 1].reshape(-1)[joint] - pred[joint])
        used += 1
    if not used:
        return SourceEstimate(np.zeros(op.shape), 0)
    Cm = np.concatenate(rows_C)
    r = np.concatenate(rows_r)
    G = Cm.T @ Cm
    rhs = Cm.T @ r
    scale = max(float(np.trace(G)) / XY, 1e-300)
    if Cm.shape[0] < XY or np.linalg.cond(G) > 1e12:
        log.info("source normal equations rank-deficient; ridge fallback (lambda=%g)", ridge)
        G = G + ridge * scale * np.eye(XY)
    S = np.linalg.solve(G, rhs)
    return SourceEstimate(S.reshape(op.shape), used)


def pde_forecast(values: np.ndarray, mask: np.ndarray, op: PdeOperator, horizon: int,
                 window: int = 6) -> np.ndarray:
    """Forecast ``horizon`` slices from an (L1, X, Y) history by repeated evolution."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoObservations("no observations to anchor forecast")
    filled, _ = fill_slices(values, mask)
    src = estimate_source(values, mask, op, window)
    out = np.empty((horizon,) + op.shape)
    v = filled[-1]
    for h in range(horizon):
        v = evolve(op, v, src.S)
        out[h] = v
    return out


K_LATTICE = tuple(0.5 * i for i in range(41))
P_LATTICE = tuple(range(-3, 4))


def one_step_error(op: PdeOperator, values: np.ndarray, mask: np.ndarray) -> float:
    filled, ok = fill_slices(values, mask)
    joint = mask[:-1] & mask[1:] & ok[:-1, None, None]
    pred = evolve_batch(op.B, filled[:-1])
    return float(np.sum(np.where(joint, values[1:] - pred, 0.0) ** 2))


def fit_pde_params(f: MaskedField | list[MaskedField], dtau: float | None = None,
                   max_rounds: int = 10) -> PdeParams:
    """Coordinate grid search over K and a spatially uniform wind.

    Alternates a sweep over the K lattice with a sweep over the (P_x, P_y)
    lattice until the selection stops changing. The objective is the masked
    one-step squared prediction error with zero source, summed over all given
    fields (which must share a grid). Ties (relative difference below 1e-12)
    go to the smaller ``||(K, P_x, P_y)||``.
    """
    fs = [f] if isinstance(f, MaskedField) else list(f)
    pairs = sum(int(np.sum((g.mask[:-1] & g.mask[1:]).any(axis=(1, 2)))) for g in fs)
    if pairs < 10:
        raise NoObservations(f"need >= 10 slice pairs with joint observations, found {pairs}")
    grid = fs[0].grid
    X, Y = grid.X, grid.Y
    dtau = grid.slice_length if dtau is None else dtau
    cache: dict[tuple, float] = {}

    def err(c):
        if c not in cache:
            p = PdeParams(K=c[0], P_x=float(c[1]), P_y=float(c[2]), n=grid.cell_size, dtau=dtau)
            op = build_transition(p, X, Y)
            cache[c] = sum(one_step_error(op, g.values, g.mask) for g in fs)
        return cache[c]

    def better(a, b):
        ea, eb = err(a), err(b)
        if not np.isfinite(eb):
            return np.isfinite(ea) or math.hypot(*a) < math.hypot(*b)
        if abs(ea - eb) <= 1e-12 * max(abs(ea), abs(eb), 1e-300):
            return math.hypot(*a) < math.hypot(*b)
        return ea < eb

    best = (0.0, 0, 0)
    for _ in range(max_rounds):
        start = best
        for k in K_LATTICE:
            c = (k, best[1], best[2])
            if better(c, best):
                best = c
        for px, py in itertools.product(P_LATTICE, P_LATTICE):
            c = (best[0], px, py)
            if better(c, best):
                best = c
        if best == start:
            break
    return PdeParams(K=best[0], P_x=float(best[1]), P_y=float(best[2]), n=grid.cell_size, dtau=dtau)
