"""End-to-end steps shared by the command line and the ablation harness."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .deeponet import DeepONetConfig, DeepONetModel, train_deeponet
from .diffusion.core import (IntegrationMode, LoadedModel, Normalizer, TrainResult, TrainRunConfig,
                             resolve_mode, sample, train)
from .eval import (daily_means, metrics, per_slice_csv, persistence_forecast, station_mask, stratified,
                   warning_eval)
from .grid_data import GridSpec, MaskedField, coverage_stats, sliding_windows, split_5_1_1
from .pde import PdeOperator, PdeParams, build_transition, fit_pde_params, pde_forecast
from .synth import FleetConfig, SynthConfig, gen_fleet_mask, gen_ground_truth, make_observed

log = logging.getLogger(__name__)


def grid_of(rc: RunConfig) -> GridSpec:
    return GridSpec(**rc.section("grid"))


def synth_configs(rc: RunConfig, seed_offset: int = 0) -> tuple[SynthConfig, FleetConfig]:
    s = rc.section("synth")
    grid = grid_of(rc)
    source = np.full((grid.X, grid.Y), float(s.pop("source")))
    profile = s.pop("source_profile")
    if profile == "ridge":
        source = source * (1.0 + 0.5 * np.cos(2 * np.pi * np.arange(grid.Y) / grid.Y))[None, :]
    elif profile != "uniform":
        raise ValueError(f"unknown synth.source_profile {profile!r}")
    seed = rc["seed"] + seed_offset
    sc = SynthConfig(grid=grid, source=source.tolist(), seed=seed, **s)
    fc = FleetConfig(seed=seed, **rc.section("fleet"))
    return sc, fc


def make_scenario(rc: RunConfig, seed_offset: int = 0) -> tuple[MaskedField, MaskedField]:
    """(truth, observed) for the configured synthetic scenario."""
    sc, fc = synth_configs(rc, seed_offset)
    truth = gen_ground_truth(sc)
    mask = gen_fleet_mask(fc, sc.grid, sc.L)
    return truth, make_observed(truth, mask, sc.obs_noise_sigma, sc.seed + 1)


def known_params(rc: RunConfig) -> PdeParams:
    g = grid_of(rc)
    return PdeParams(K=rc["synth.K"], P_x=rc["synth.P_x"], P_y=rc["synth.P_y"], n=g.cell_size,
                     dtau=g.slice_length)


def resolve_operator(fit: str, train_field: MaskedField, rc: RunConfig) -> PdeOperator:
    """Transport operator for a fitting policy.

    known: configured synthetic parameters. fit_train: fitted on the training
    split. fit_external: fitted on the training split pooled with three
    independently seeded scenarios. random: fitted on white noise.
    """
    g = train_field.grid
    if fit == "known":
        params = known_params(rc)
    elif fit == "fit_train":
        params = fit_pde_params(train_field)
    elif fit == "fit_external":
        extra = [make_scenario(rc, seed_offset=1000 + i)[1] for i in range(3)]
        params = fit_pde_params([train_field] + [split_5_1_1(e)[0] for e in extra])
    elif fit == "random":
        rng = np.random.default_rng(rc["seed"] + 7)
        obs = train_field.values[train_field.mask]
        noise = rng.normal(obs.mean() if obs.size else 0.0, obs.std() if obs.size else 1.0,
                           size=train_field.values.shape)
        params = fit_pde_params(MaskedField(noise, np.ones(noise.shape, bool), g))
    else:
        raise ValueError(f"unknown pde_fit {fit!r}")
    log.info("PDE operator (%s): K=%s P=(%s, %s)", fit, params.K, params.P_x, params.P_y)
    return build_transition(params, g.X, g.Y)


def train_config(rc: RunConfig, mode: str | IntegrationMode | None = None, **over) -> TrainRunConfig:
    t = rc.section("train")
    m = resolve_mode(mode if mode is not None else t.pop("mode"))
    t.pop("mode", None)
    t.update(over)
    return TrainRunConfig(seed=rc["seed"], pde_role=m.pde_role, deeponet_role=m.deeponet_role,
                          pde_fit=m.pde_fit, **t)


def deeponet_config(rc: RunConfig, mode: IntegrationMode) -> DeepONetConfig:
    d = rc.section("deeponet")
    return DeepONetConfig(seed=rc["seed"], role=mode.deeponet_role if mode.deeponet_role != "none"
                          else "frozen_condition", loss_mode=mode.deeponet_loss, hidden=tuple(d.pop("hidden")), **d)


@dataclass
class Fitted:
    result: TrainResult
    op: PdeOperator
    deeponet_cfg: DeepONetConfig | None
    deeponet_seconds: float = 0.0

    def loaded(self) -> LoadedModel:
        return LoadedModel(self.result.denoiser, self.result.deeponet, self.op, self.result.norm, self.result.cfg)


def fit_all(train_field: MaskedField, rc: RunConfig, mode=None, curve_path=None, deeponet: DeepONetModel | None = None,
            op: PdeOperator | None = None, **over) -> Fitted:
    """Pretrain DeepONet (unless given or unused), resolve the operator, train the denoiser."""
    L1, L2 = rc["window.L1"], rc["window.L2"]
    windows = sliding_windows(train_field, L1, L2)
    m = resolve_mode(mode if mode is not None else rc["train.mode"])
    tcfg = train_config(rc, m, **over)
    op = op or resolve_operator(m.pde_fit, train_field, rc)
    dcfg = None
    secs = 0.0
    if m.deeponet_role != "none":
        dcfg = deeponet_config(rc, m)
        if deeponet is None:
            t0 = time.monotonic()
            deeponet = train_deeponet(windows, dcfg, B_op=op.B)
            secs = time.monotonic() - t0
    else:
        deeponet = None
    norm = Normalizer.fit(windows)
    res = train(windows, deeponet, op, tcfg, norm, curve_path=curve_path)
    return Fitted(res, op, dcfg, secs)


def forecast_starts(L: int, L1: int, L2: int, stride: int) -> list[int]:
    return list(range(0, L - (L1 + L2) + 1, max(1, stride)))


def forecast_field(field: MaskedField, L1: int, L2: int, stride: int, method: str = "model",
                   model: LoadedModel | None = None, seed: int = 0, samples: int = 1,
                   jobs: int = 1) -> MaskedField:
    """Forecast windows cut from ``field``; the result's mask marks forecast entries.

    Windows start every ``stride`` slices. Where windows overlap, the earliest
    window's forecast is kept.
    """
    starts = forecast_starts(field.L, L1, L2, stride)
    if not starts:
        raise ValueError(f"field of {field.L} slices is shorter than one {L1}+{L2} window")
    v_co = np.stack([field.values[s:s + L1] for s in starts])
    m_co = np.stack([field.mask[s:s + L1] for s in starts])
    if method == "model":
        if model is None:
            raise ValueError("method 'model' needs a trained checkpoint")
        sched = model.cfg.schedule()
        chunks = np.array_split(np.arange(len(starts)), max(1, min(jobs, len(starts))))

        def run(ix):
            return sample(v_co[ix], m_co[ix], model.denoiser, model.deeponet, model.op, sched, model.cfg,
                          model.norm, seed=seed, n_samples=samples, window_ids=np.asarray(starts)[ix])

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as ex:
                preds = np.concatenate(list(ex.map(run, chunks)))
        else:
            preds = np.concatenate([run(ix) for ix in chunks])
    elif method == "persistence":
        preds = np.stack([persistence_forecast(v_co[i], m_co[i], L2) for i in range(len(starts))])
    elif method == "pde":
        if model is None:
            raise ValueError("method 'pde' needs an operator (pass a checkpoint)")
        preds = np.stack([pde_forecast(v_co[i], m_co[i], model.op, L2) for i in range(len(starts))])
    elif method == "deeponet":
        if model is None or model.deeponet is None:
            raise ValueError("method 'deeponet' needs a checkpoint with a DeepONet")
        preds = model.deeponet.predict(v_co, m_co.astype(float))
    else:
        raise ValueError(f"unknown forecast method {method!r}")
    values = np.zeros(field.values.shape)
    mask = np.zeros(field.values.shape, bool)
    for s, p in zip(starts, preds):
        sl = slice(s + L1, s + L1 + L2)
        new = ~mask[sl]
        values[sl] = np.where(new, p, values[sl])
        mask[sl] = True
    return MaskedField(values, mask, field.grid)


def evaluation_mask(pred: MaskedField, truth: MaskedField, observed: MaskedField | None = None,
                    truth_source: str = "mobile", n_stations: int = 4, seed: int = 0) -> np.ndarray:
    """Entries scored: forecast entries with ground truth, restricted by the protocol.

    mobile: cells observed by the fleet (``observed`` mask, or the truth mask).
    station: a fixed set of designated cells.
    """
    if pred.values.shape != truth.values.shape:
        raise ValueError(f"prediction shape {pred.values.shape} != truth shape {truth.values.shape}")
    m = pred.mask & truth.mask
    if truth_source == "mobile":
        if observed is not None:
            m = m & observed.mask
    elif truth_source == "station":
        m = m & station_mask(truth.values.shape, n_stations, seed)
    else:
        raise ValueError(f"unknown truth source {truth_source!r}")
    return m


def evaluate_fields(pred: MaskedField, truth: MaskedField, observed: MaskedField | None = None,
                    truth_source: str = "mobile", threshold: float = 25.0, n_stations: int = 4,
                    start_hour: float = 0.0, seed: int = 0) -> dict:
    m = evaluation_mask(pred, truth, observed, truth_source, n_stations, seed)
    cov_src = observed if observed is not None else truth
    _, cov = coverage_stats(cov_src)
    rep = {"overall": metrics(pred.values, truth.values, m),
           "stratified": stratified(pred.values, truth.values, m, cov, truth.grid.slice_length, start_hour)}
    p_day, p_ok = daily_means(pred.values, m)
    t_day, t_ok = daily_means(truth.values, m)
    rep["warning"] = warning_eval(p_day, t_day, threshold, valid=p_ok & t_ok)
    rep["csv"] = per_slice_csv(pred.values, truth.values, m)
    return rep
