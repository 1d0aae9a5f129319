"""Training and sampling for the conditional diffusion forecaster."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..deeponet import DeepONetConfig, DeepONetModel
from ..grid_data import WindowSample
from ..pde import NoObservations, PdeOperator, PdeParams, pde_forecast
from ..tensor_core import Tape, Tensor, adam_step, checkpoint
from ..tensor_core import tensor as T
from .denoiser import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, build_schedule, forward_noise, reverse_step

log = logging.getLogger(__name__)

PDE_ROLES = ("none", "condition", "diff_loss")
DEEPONET_ROLES = ("none", "frozen_condition", "trainable_condition")
PDE_FITS = ("known", "fit_train", "fit_external", "random")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegrationMode:
    pde_role: str = "diff_loss"
    deeponet_role: str = "frozen_condition"
    pde_fit: str = "known"
    deeponet_loss: str = "mse"

    def __post_init__(self):
        if self.pde_role not in PDE_ROLES:
            raise ValueError(f"unknown pde_role {self.pde_role!r}")
        if self.deeponet_role not in DEEPONET_ROLES:
            raise ValueError(f"unknown deeponet_role {self.deeponet_role!r}")
        if self.pde_fit not in PDE_FITS:
            raise ValueError(f"unknown pde_fit {self.pde_fit!r}")


# combination table: diffusion alone, DeepONet-conditioned, PDE-conditioned,
# PDE-regularized, and the mixed variants (10 is the full model)
MODES: dict[str, IntegrationMode] = {
    "diff": IntegrationMode("none", "none"),
    "1": IntegrationMode("none", "frozen_condition"),
    "2": IntegrationMode("none", "trainable_condition"),
    "3": IntegrationMode("condition", "none", "fit_train"),
    "4": IntegrationMode("condition", "none", "fit_external"),
    "5": IntegrationMode("diff_loss", "none"),
    "6": IntegrationMode("condition", "frozen_condition", "fit_train"),
    "7": IntegrationMode("condition", "frozen_condition", "fit_external"),
    "8": IntegrationMode("condition", "frozen_condition", "random"),
    "9": IntegrationMode("none", "frozen_condition", "known", "mse_plus_pde"),
    "10": IntegrationMode("diff_loss", "frozen_condition"),
}


def resolve_mode(mode: str | IntegrationMode) -> IntegrationMode:
    if isinstance(mode, IntegrationMode):
        return mode
    key = str(mode).strip().lstrip("m")
    if key not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    return MODES[key]


@dataclass
class TrainRunConfig:
    omega: float = 1.0
    n_iter: int = 2000
    batch_size: int = 1
    lr: float = 1e-3
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.5
    layers: int = 4
    channels: int = 64
    heads: int = 8
    ff_dim: int = 64
    pde_role: str = "diff_loss"
    deeponet_role: str = "frozen_condition"
    pde_fit: str = "known"
    masked_loss: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.n_iter < 0 or self.batch_size < 1:
            raise ValueError("n_iter must be >= 0 and batch_size >= 1")
        IntegrationMode(self.pde_role, self.deeponet_role, self.pde_fit)

    @property
    def mode(self) -> IntegrationMode:
        return IntegrationMode(self.pde_role, self.deeponet_role, self.pde_fit)

    def with_mode(self, mode) -> "TrainRunConfig":
        m = resolve_mode(mode)
        d = asdict(self)
        d.update(pde_role=m.pde_role, deeponet_role=m.deeponet_role, pde_fit=m.pde_fit)
        return TrainRunConfig(**d)

    @property
    def effective_omega(self) -> float:
        return self.omega if self.pde_role == "diff_loss" else 0.0

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_min, self.beta_max)

    def denoiser_config(self, X: int, Y: int, L1: int, L2: int) -> DenoiserConfig:
        return DenoiserConfig(X=X, Y=Y, L1=L1, L2=L2, channels=self.channels, heads=self.heads,
                              layers=self.layers, ff_dim=self.ff_dim, T=self.T,
                              extra_cond=int(self.pde_role == "condition"), seed=self.seed)


@dataclass
class Normalizer:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, windows: list[WindowSample] | None = None, values=None, mask=None) -> "Normalizer":
        """Observed-entry mean/std; pass windows or a (values, mask) pair."""
        if windows is not None:
            obs = np.concatenate([np.concatenate([w.v_co[w.m_co > 0], w.v_ta[w.m_ta > 0]]) for w in windows])
        else:
            obs = np.asarray(values)[np.asarray(mask, bool)]
        if obs.size == 0:
            raise ValueError("no observed values to standardize with")
        std = float(obs.std())
        return cls(float(obs.mean()), std if std > 1e-12 else 1.0)

    def apply(self, v, m=None):
        z = (np.asarray(v, float) - self.mean) / self.std
        return z if m is None else np.where(np.asarray(m) > 0, z, 0.0)

    def invert(self, z):
        return np.asarray(z) * self.std + self.mean


# --- conditioning ----------------------------------------------------------

def _stack(windows: list[WindowSample]):
    return (np.stack([w.v_co for w in windows]), np.stack([w.m_co for w in windows]).astype(float),
            np.stack([w.v_ta for w in windows]), np.stack([w.m_ta for w in windows]).astype(float))


def pde_condition(v_co, m_co, op: PdeOperator, horizon: int) -> np.ndarray:
    """PDE-only forecasts for a batch of histories; empty histories give zeros."""
    out = np.zeros((len(v_co), horizon) + op.shape)
    for i in range(len(v_co)):
        try:
            out[i] = pde_forecast(v_co[i], m_co[i] > 0, op, horizon)
        except NoObservations:
            pass
    return out


def condition_pack(z_co, m_co, z_de, z_pde=None):
    """Stack conditional channels over the full window, shape (B, L, X, Y, C).

    History slices carry the zero-filled values and mask; target slices carry
    the DeepONet forecast (and the PDE forecast when given). ``z_de`` may be a
    Tensor so gradients reach a trainable DeepONet.
    """
    Bn, L1 = z_co.shape[:2]
    L2 = z_de.shape[1]
    pad_ta = np.zeros((Bn, L2) + z_co.shape[2:])
    pad_co = np.zeros(z_co.shape)
    parts = [np.concatenate([z_co, pad_ta], 1), np.concatenate([m_co, pad_ta], 1)]
    if z_pde is not None:
        parts.append(np.concatenate([pad_co, z_pde], 1))
    fixed = np.stack(parts, axis=-1)
    if isinstance(z_de, Tensor):
        de = T.concat([Tensor(pad_co), z_de], axis=1).reshape(fixed.shape[:-1] + (1,))
        return T.concat([Tensor(fixed[..., :2]), de, Tensor(fixed[..., 2:])], axis=-1)
    de = np.concatenate([pad_co, z_de], 1)[..., None]
    return np.concatenate([fixed[..., :2], de, fixed[..., 2:]], axis=-1)


def deeponet_standardized(model: DeepONetModel, v_co, m_co, norm: Normalizer, tape: bool = False):
    """DeepONet forecast with the target mask hidden, in standardized units."""
    m_full = np.concatenate([m_co, np.zeros((len(v_co), model.L2) + v_co.shape[2:])], 1)
    if tape:
        return (model.forward(v_co, m_co, m_full) - norm.mean) * (1.0 / norm.std)
    return norm.apply(model.forward(v_co, m_co, m_full).data)


def predict_noise(model: Denoiser, v_t, t, cond) -> np.ndarray:
    return model(v_t, t, cond).data


# --- loss ------------------------------------------------------------------

def step_loss(eps, eps_hat, B: np.ndarray, omega: float, m_ta):
    """``L_eps + omega * L_PDE`` on observed target entries.

    ``L_PDE`` compares slice ``l`` of the injected noise with ``B`` applied to
    predicted slice ``l-1`` (no source), masked at slice ``l``. Returns the
    loss Tensor and the two parts as floats.
    """
    eps = np.asarray(eps, float)
    eps_hat = eps_hat if isinstance(eps_hat, Tensor) else Tensor(eps_hat)
    m = np.broadcast_to(np.asarray(m_ta, float), eps.shape)
    if eps.ndim == 3:
        eps, m = eps[None], m[None]
        eps_hat = eps_hat.reshape((1,) + eps_hat.shape)
    n = m.sum()
    if n == 0:
        raise ValueError("step_loss needs at least one observed target entry")
    l_eps = T.square((eps_hat - eps) * m).sum() * (1.0 / n)
    loss = l_eps
    l_pde_val = 0.0
    n_pde = m[:, 1:].sum()
    if eps.shape[1] > 1 and n_pde > 0:
        Bn, L2, X, Y = eps.shape
        prev = eps_hat[:, :-1].reshape((-1, X * Y))
        g = T.matmul(prev, Tensor(np.asarray(B).T)).reshape((Bn, L2 - 1, X, Y))
        l_pde = T.square((g - eps[:, 1:]) * m[:, 1:]).sum() * (1.0 / n_pde)
        l_pde_val = float(l_pde.data)
        if omega:
            loss = loss + l_pde * float(omega)
    return loss, float(l_eps.data), l_pde_val


# --- training --------------------------------------------------------------

@dataclass
class TrainResult:
    denoiser: Denoiser
    deeponet: DeepONetModel | None
    norm: Normalizer
    cfg: TrainRunConfig
    curve: list = field(default_factory=list)
    seconds: float = 0.0

    def smoothed(self, window: int = 100) -> np.ndarray:
        loss = np.array([c[1] for c in self.curve])
        if len(loss) == 0:
            return loss
        w = min(window, len(loss))
        return np.convolve(loss, np.ones(w) / w, mode="valid")


def write_curve(curve, path) -> None:
    lines = ["iter,loss,l_eps,l_pde"] + [f"{i},{a:.10g},{b:.10g},{c:.10g}" for i, a, b, c in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def train(dataset: list[WindowSample], deeponet_model: DeepONetModel | None, op: PdeOperator,
          cfg: TrainRunConfig, norm: Normalizer | None = None, curve_path=None) -> TrainResult:
    """Gradient training of the denoiser on noised, standardized targets."""
    if not dataset:
        raise ValueError("empty training set")
    t0 = time.monotonic()
    norm = norm or Normalizer.fit(dataset)
    v_co, m_co, v_ta, m_ta = _stack(dataset)
    n, L1, X, Y = v_co.shape
    L2 = v_ta.shape[1]
    z_co = norm.apply(v_co, m_co)
    z_ta = norm.apply(v_ta, m_ta)
    loss_mask = m_ta if cfg.masked_loss else np.ones_like(m_ta)
    sched = cfg.schedule()
    role = cfg.deeponet_role
    if role != "none" and deeponet_model is None:
        raise ValueError(f"deeponet_role={role} needs a pretrained DeepONet")
    z_de = (deeponet_standardized(deeponet_model, v_co, m_co, norm) if role == "frozen_condition"
            else np.zeros(v_ta.shape))
    z_pde = norm.apply(pde_condition(v_co, m_co, op, L2)) if cfg.pde_role == "condition" else None

    den = Denoiser(cfg.denoiser_config(X, Y, L1, L2))
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, n)
    omega = cfg.effective_omega
    curve = []
    for it in range(cfg.n_iter):
        idx = np.sort(rng.choice(n, size=bs, replace=False))
        if loss_mask[idx].sum() == 0:
            idx = np.array([int(rng.choice(np.flatnonzero(loss_mask.sum(axis=(1, 2, 3)) > 0)))])
        t = rng.integers(1, sched.T + 1, size=len(idx))
        eps = rng.standard_normal((len(idx), L2, X, Y))
        v_t = forward_noise(z_ta[idx], t, eps, sched)
        den.store.zero_grad()
        if role == "trainable_condition":
            deeponet_model.store.zero_grad()
        with Tape() as tape:
            de = (deeponet_standardized(deeponet_model, v_co[idx], m_co[idx], norm, tape=True)
                  if role == "trainable_condition" else z_de[idx])
            cond = condition_pack(z_co[idx], m_co[idx], de, None if z_pde is None else z_pde[idx])
            eps_hat = den(v_t, t, cond)
            loss, l_eps, l_pde = step_loss(eps, eps_hat, op.B, omega, loss_mask[idx])
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise TrainingDiverged(f"non-finite loss at iteration {it} (t={t.tolist()}, "
                                   f"l_eps={l_eps}, l_pde={l_pde}, max|eps_hat|={np.abs(eps_hat.data).max()})")
        tape.backward(loss)
        adam_step(den.store, den.store.grads(), lr=cfg.lr)
        if role == "trainable_condition":
            adam_step(deeponet_model.store, deeponet_model.store.grads(), lr=cfg.lr)
        curve.append((it, lv, l_eps, l_pde))
        if it % 100 == 0:
            log.debug("iter %d loss %.4f (eps %.4f, pde %.4f)", it, lv, l_eps, l_pde)
    if curve_path is not None:
        write_curve(curve, curve_path)
    return TrainResult(den, deeponet_model, norm, cfg, curve, time.monotonic() - t0)


# --- sampling --------------------------------------------------------------

def sample(v_co, m_co, denoiser: Denoiser, deeponet_model: DeepONetModel | None, op: PdeOperator,
           sched: NoiseSchedule, cfg: TrainRunConfig, norm: Normalizer, seed: int = 0,
           n_samples: int = 1, window_ids=None) -> np.ndarray:
    """Ancestral sampling for a batch of histories (B, L1, X, Y) -> (B, L2, X, Y).

    Window ``i`` draws its noise from its own stream seeded by
    ``(seed, window_ids[i])``, so results do not depend on batching.
    """
    v_co = np.asarray(v_co, float)
    m_co = np.asarray(m_co, float)
    single = v_co.ndim == 3
    if single:
        v_co, m_co = v_co[None], m_co[None]
    Bn = len(v_co)
    c = denoiser.cfg
    shape = (c.L2, c.X, c.Y)
    ids = np.arange(Bn) if window_ids is None else np.asarray(window_ids)
    rngs = [np.random.default_rng([int(seed), int(i)]) for i in ids]
    z_co = norm.apply(v_co, m_co)
    if cfg.deeponet_role != "none":
        if deeponet_model is None:
            raise ValueError("this model was trained with a DeepONet condition; none supplied")
        z_de = deeponet_standardized(deeponet_model, v_co, m_co, norm)
    else:
        z_de = np.zeros((Bn,) + shape)
    z_pde = norm.apply(pde_condition(v_co, m_co, op, c.L2)) if cfg.pde_role == "condition" else None
    cond = condition_pack(z_co, m_co, z_de, z_pde)
    total = np.zeros((Bn,) + shape)
    for _ in range(n_samples):
        v = np.stack([r.standard_normal(shape) for r in rngs])
        for t in range(sched.T, 0, -1):
            eps_hat = denoiser(v, np.full(Bn, t), cond).data
            z = np.stack([r.standard_normal(shape) for r in rngs]) if t > 1 else None
            v = reverse_step(v, eps_hat, t, sched, z)
        total += np.maximum(norm.invert(v), 0.0)
    out = total / n_samples
    return out[0] if single else out


# --- checkpoints -----------------------------------------------------------

def save_model(path, result: TrainResult, op: PdeOperator, deeponet_cfg: DeepONetConfig | None = None) -> None:
    """STPC container plus a JSON sidecar with the configs needed to rebuild."""
    path = Path(path)
    rec = dict(result.denoiser.records("denoiser."))
    if result.deeponet is not None:
        rec.update(result.deeponet.records("deeponet."))
    rec.update(op.records("pde."))
    rec["norm.mean"] = np.array([result.norm.mean])
    rec["norm.std"] = np.array([result.norm.std])
    checkpoint.save(path, rec)
    meta = {"train": asdict(result.cfg), "denoiser": asdict(result.denoiser.cfg),
            "pde": op.params.to_json(), "grid": list(op.shape)}
    if result.deeponet is not None:
        dcfg = deeponet_cfg or result.deeponet.cfg
        meta["deeponet"] = {**asdict(dcfg), "hidden": list(dcfg.hidden),
                            "L1": result.deeponet.L1, "L2": result.deeponet.L2}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


@dataclass
class LoadedModel:
    denoiser: Denoiser
    deeponet: DeepONetModel | None
    op: PdeOperator
    norm: Normalizer
    cfg: TrainRunConfig


def load_model(path) -> LoadedModel:
    path = Path(path)
    side = Path(str(path) + ".json")
    if not path.exists() or not side.exists():
        raise FileNotFoundError(f"missing checkpoint {path} or its sidecar {side.name}")
    rec = checkpoint.load(path)
    meta = json.loads(side.read_text())
    names = {f.name for f in fields(TrainRunConfig)}
    cfg = TrainRunConfig(**{k: v for k, v in meta["train"].items() if k in names})
    den = Denoiser(DenoiserConfig(**meta["denoiser"]))
    den.load_records(rec, "denoiser.")
    don = None
    if "deeponet" in meta:
        d = dict(meta["deeponet"])
        L1, L2 = d.pop("L1"), d.pop("L2")
        d["hidden"] = tuple(d["hidden"])
        X, Y = meta["grid"]
        don = DeepONetModel(L1, L2, X, Y, DeepONetConfig(**d))
        don.load_records(rec, "deeponet.")
    params = PdeParams.from_json(meta["pde"])
    X, Y = meta["grid"]
    op = PdeOperator(rec["pde.A"], rec["pde.B"], rec["pde.C"], params, (X, Y))
    norm = Normalizer(float(rec["norm.mean"][0]), float(rec["norm.std"][0]))
    return LoadedModel(den, don, op, norm, cfg)
