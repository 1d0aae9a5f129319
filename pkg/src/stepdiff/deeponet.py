"""Branch/trunk operator network producing the preliminary forecast.

Branch input is the zero-filled history concatenated with its mask; trunk
input is the flattened full-window mask. The trunk emits a ``D x p`` basis
(D = L2*X*Y) that is contracted with the ``p`` branch coefficients.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid_data import WindowSample
from .tensor_core import ParamStore, Tape, Tensor, adam_step, nn
from .tensor_core import tensor as T
from .tensor_core.tensor import DimensionError

log = logging.getLogger(__name__)


@dataclass
class DeepONetConfig:
    p: int = 64
    hidden: tuple = (256, 256)
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 16
    role: str = "frozen_condition"
    loss_mode: str = "mse"
    omega: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.role not in ("none", "frozen_condition", "trainable_condition"):
            raise ValueError(f"unknown DeepONet role {self.role!r}")
        if self.loss_mode not in ("mse", "mse_plus_pde"):
            raise ValueError(f"unknown DeepONet loss_mode {self.loss_mode!r}")
        self.hidden = tuple(int(h) for h in self.hidden)


class DeepONetModel:
    def __init__(self, L1: int, L2: int, X: int, Y: int, cfg: DeepONetConfig | None = None):
        self.cfg = cfg or DeepONetConfig()
        self.L1, self.L2, self.X, self.Y = L1, L2, X, Y
        self.D = L2 * X * Y
        p = self.cfg.p
        rng = np.random.default_rng(self.cfg.seed)
        self.store = ParamStore()
        n_branch = 2 * L1 * X * Y
        n_trunk = (L1 + L2) * X * Y
        self.branch = nn.FNN(self.store, "branch", [n_branch, *self.cfg.hidden, p], rng)
        self.trunk = nn.FNN(self.store, "trunk", [n_trunk, *self.cfg.hidden, self.D * p], rng)
        self.bias = self.store.add("bias", np.zeros(self.D))
        # value scaling fixed at training time; forward works in raw units
        self.mean = 0.0
        self.std = 1.0
        self.final_loss = float("nan")

    def forward(self, v_co, m_co, m_full) -> Tensor:
        """Batched forward: v_co, m_co (B, L1, X, Y); m_full (B, L1+L2, X, Y) -> (B, L2, X, Y)."""
        v_co = np.asarray(v_co, float)
        m_co = np.asarray(m_co, float)
        m_full = np.asarray(m_full, float)
        squeeze = v_co.ndim == 3
        if squeeze:
            v_co, m_co, m_full = v_co[None], m_co[None], m_full[None]
        Bn = v_co.shape[0]
        want_co = (Bn, self.L1, self.X, self.Y)
        want_full = (Bn, self.L1 + self.L2, self.X, self.Y)
        if v_co.shape != want_co or m_co.shape != want_co or m_full.shape != want_full:
            raise DimensionError(f"DeepONet expects v_co/m_co {want_co[1:]} and m_full {want_full[1:]}, "
                                 f"got {v_co.shape[1:]}, {m_co.shape[1:]}, {m_full.shape[1:]}")
        z = np.where(m_co > 0, (v_co - self.mean) / self.std, 0.0)
        b_in = np.concatenate([z.reshape(Bn, -1), m_co.reshape(Bn, -1)], axis=1)
        coef = self.branch(Tensor(b_in))                                   # (B, p)
        basis = self.trunk(Tensor(m_full.reshape(Bn, -1)))                  # (B, D*p)
        basis = basis.reshape((Bn, self.D, self.cfg.p))
        out = T.matmul(basis, coef.reshape((Bn, self.cfg.p, 1))).reshape((Bn, self.D)) + self.bias
        out = out * self.std + self.mean
        out = out.reshape((Bn, self.L2, self.X, self.Y))
        return out[0] if squeeze else out

    def predict(self, v_co, m_co, m_ta=None) -> np.ndarray:
        """Forecast-time call: the target part of the trunk mask is zero unless given."""
        v_co = np.asarray(v_co, float)
        m_co = np.asarray(m_co, float)
        lead = v_co.shape[:-3]
        if m_ta is None:
            m_ta = np.zeros(lead + (self.L2, self.X, self.Y))
        m_full = np.concatenate([m_co, np.asarray(m_ta, float)], axis=-3)
        return self.forward(v_co, m_co, m_full).data

    def records(self, prefix: str = "deeponet.") -> dict[str, np.ndarray]:
        rec = self.store.state_dict(prefix)
        rec[prefix + "scale"] = np.array([self.mean, self.std])
        return rec

    def load_records(self, rec: dict[str, np.ndarray], prefix: str = "deeponet.") -> None:
        self.store.load_state_dict(rec, prefix)
        self.mean, self.std = (float(v) for v in rec[prefix + "scale"])


def _stack(windows: list[WindowSample]):
    v_co = np.stack([w.v_co for w in windows])
    m_co = np.stack([w.m_co for w in windows]).astype(float)
    v_ta = np.stack([w.v_ta for w in windows])
    m_ta = np.stack([w.m_ta for w in windows]).astype(float)
    return v_co, m_co, v_ta, m_ta


def deeponet_loss(model: DeepONetModel, v_co, m_co, v_ta, m_ta, B_op=None, omega: float = 0.0) -> Tensor:
    """Masked MSE in scaled units, plus ``omega * ||v_de[l+1] - B v_de[l]||^2`` if ``B_op`` is given."""
    m_full = np.concatenate([m_co, np.zeros_like(m_ta)], axis=1)
    pred = model.forward(v_co, m_co, m_full)
    inv = 1.0 / model.std
    diff = (pred - v_ta) * (m_ta * inv)
    loss = T.square(diff).sum() * (1.0 / m_ta.sum())
    if B_op is not None and omega > 0:
        z = pred * inv
        cur = z[:, :-1].reshape((-1, model.X * model.Y))
        nxt = z[:, 1:].reshape((-1, model.X * model.Y))
        res = nxt - T.matmul(cur, Tensor(B_op.T))
        loss = loss + T.square(res).mean() * omega
    return loss


def train_deeponet(dataset: list[WindowSample], cfg: DeepONetConfig, B_op: np.ndarray | None = None,
                   L1: int | None = None, L2: int | None = None) -> DeepONetModel:
    """Fit on masked target MSE with Adam; ``B_op`` enables the transport penalty."""
    if not dataset:
        raise ValueError("empty DeepONet training set")
    v_co, m_co, v_ta, m_ta = _stack(dataset)
    if m_ta.sum() == 0:
        raise ValueError("no observed target entries to train on")
    L1 = L1 or v_co.shape[1]
    L2 = L2 or v_ta.shape[1]
    X, Y = v_co.shape[2:]
    model = DeepONetModel(L1, L2, X, Y, cfg)
    obs = np.concatenate([v_co[m_co > 0], v_ta[m_ta > 0]])
    model.mean = float(obs.mean())
    model.std = float(obs.std()) if obs.std() > 1e-12 else 1.0
    use_pde = cfg.loss_mode == "mse_plus_pde" and B_op is not None
    rng = np.random.default_rng(cfg.seed + 1)
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    loss_val = float("nan")
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, bs):
            idx = np.sort(order[s:s + bs])
            if m_ta[idx].sum() == 0:
                continue
            model.store.zero_grad()
            with Tape() as tape:
                loss = deeponet_loss(model, v_co[idx], m_co[idx], v_ta[idx], m_ta[idx],
                                     B_op if use_pde else None, cfg.omega)
            tape.backward(loss)
            adam_step(model.store, model.store.grads(), lr=cfg.lr)
            loss_val = float(loss.data)
    model.final_loss = masked_mse(model, dataset)
    log.info("DeepONet trained: final masked MSE %.4g (last batch %.4g)", model.final_loss, loss_val)
    return model


def masked_mse(model: DeepONetModel, dataset: list[WindowSample]) -> float:
    v_co, m_co, v_ta, m_ta = _stack(dataset)
    pred = model.predict(v_co, m_co)
    return float(np.sum(m_ta * (pred - v_ta) ** 2) / max(m_ta.sum(), 1.0))
