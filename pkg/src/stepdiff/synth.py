"""Synthetic ground truth and mobile-fleet observation masks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid_data import GridSpec, MaskedField, persist_field
from .pde import PdeParams, build_transition, evolve


@dataclass
class SynthConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    L: int = 336
    K: float = 5.0
    P_x: float | list = 0.0
    P_y: float | list = 0.0
    source: float | list = 0.0
    # relative amplitude of a 24 h sinusoidal modulation of the source (0 = constant)
    source_diurnal: float = 0.0
    init_mode: str = "smooth-random"
    base_level: float = 40.0
    obs_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 0 or self.obs_noise_sigma < 0:
            raise ValueError("K and obs_noise_sigma must be non-negative")
        if self.init_mode not in ("smooth-random", "hotspot"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)

    def pde_params(self) -> PdeParams:
        g = self.grid
        return PdeParams(K=self.K, P_x=np.asarray(self.P_x, float), P_y=np.asarray(self.P_y, float),
                         n=g.cell_size, dtau=g.slice_length)

    def source_field(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.source, float), (self.grid.X, self.grid.Y)).copy()

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class FleetConfig:
    n_vehicles: int = 6
    mode: str = "free-car"
    route_period: int = 1
    route_length: int = 10
    cells_per_slice: int = 12
    active_hours: tuple = tuple(range(24))
    start_hour: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_vehicles < 1:
            raise ValueError("n_vehicles must be >= 1")
        if self.mode not in ("bus-route", "free-car"):
            raise ValueError(f"unknown fleet mode {self.mode!r}")
        if self.route_period < 1 or self.route_length < 1 or self.cells_per_slice < 1:
            raise ValueError("route_period, route_length and cells_per_slice must be >= 1")
        self.active_hours = tuple(sorted(set(int(h) for h in self.active_hours)))


def _initial_slice(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    X, Y = cfg.grid.X, cfg.grid.Y
    xs, ys = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    v = np.full((X, Y), cfg.base_level)
    if cfg.init_mode == "hotspot":
        cx, cy = (X - 1) / 4.0, (Y - 1) / 2.0
        v += 3.0 * cfg.base_level * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / 2.0)
        return v
    for _ in range(4):
        cx, cy = rng.uniform(0, X - 1), rng.uniform(0, Y - 1)
        w = rng.uniform(1.0, 3.0)
        amp = rng.uniform(-0.5, 1.0) * cfg.base_level
        v += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * w * w))
    return np.maximum(v, 0.0)


def source_at(cfg: SynthConfig, l: int) -> np.ndarray:
    S = cfg.source_field()
    if cfg.source_diurnal:
        hour = (l * cfg.grid.slice_length / 3600.0) % 24.0
        S = S * (1.0 + cfg.source_diurnal * np.sin(2 * np.pi * (hour - 9.0) / 24.0))
    return S


def gen_ground_truth(cfg: SynthConfig) -> MaskedField:
    """Evolve an initial slice with the transport operator; clamp at zero."""
    rng = np.random.default_rng(cfg.seed)
    op = build_transition(cfg.pde_params(), cfg.grid.X, cfg.grid.Y)
    vals = np.empty((cfg.L, cfg.grid.X, cfg.grid.Y))
    vals[0] = _initial_slice(cfg, rng)
    for l in range(cfg.L - 1):
        vals[l + 1] = np.maximum(evolve(op, vals[l], source_at(cfg, l)), 0.0)
    return MaskedField(vals, np.ones(vals.shape, bool), cfg.grid)


def _route(rng: np.random.Generator, X: int, Y: int, length: int) -> list[tuple[int, int]]:
    """Random self-avoiding-when-possible walk used as a cyclic bus route."""
    x, y = int(rng.integers(X)), int(rng.integers(Y))
    path = [(x, y)]
    seen = {(x, y)}
    steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    while len(path) < min(length, X * Y):
        opts = [(x + dx, y + dy) for dx, dy in steps if 0 <= x + dx < X and 0 <= y + dy < Y]
        fresh = [c for c in opts if c not in seen]
        if fresh:
            x, y = fresh[int(rng.integers(len(fresh)))]
            seen.add((x, y))
            path.append((x, y))
        else:
            # dead end: restart from a random unvisited cell
            free = [(i, j) for i in range(X) for j in range(Y) if (i, j) not in seen]
            x, y = free[int(rng.integers(len(free)))]
            seen.add((x, y))
            path.append((x, y))
    return path


def gen_fleet_mask(cfg: FleetConfig, grid: GridSpec, L: int) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    X, Y = grid.X, grid.Y
    mask = np.zeros((L, X, Y), dtype=bool)
    active = set(cfg.active_hours)
    hours = [int((cfg.start_hour + l * grid.slice_length / 3600.0) % 24) for l in range(L)]
    if cfg.mode == "bus-route":
        routes = [_route(rng, X, Y, cfg.route_length) for _ in range(cfg.n_vehicles)]
        for l in range(L):
            if hours[l] not in active:
                continue
            for r in routes:
                chunk = -(-len(r) // cfg.route_period)
                phase = l % cfg.route_period
                for x, y in r[phase * chunk:(phase + 1) * chunk]:
                    mask[l, x, y] = True
        return mask
    pos = [(int(rng.integers(X)), int(rng.integers(Y))) for _ in range(cfg.n_vehicles)]
    steps = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)])
    for l in range(L):
        on = hours[l] in active
        for v in range(cfg.n_vehicles):
            x, y = pos[v]
            for _ in range(cfg.cells_per_slice):
                if on:
                    mask[l, x, y] = True
                dx, dy = steps[int(rng.integers(4))]
                x = min(max(x + dx, 0), X - 1)
                y = min(max(y + dy, 0), Y - 1)
            pos[v] = (x, y)
    return mask


def make_observed(truth: MaskedField, mask: np.ndarray, obs_noise_sigma: float, seed: int) -> MaskedField:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != truth.values.shape:
        raise ValueError(f"mask shape {mask.shape} != field shape {truth.values.shape}")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=mask.shape) * obs_noise_sigma
    return MaskedField(np.where(mask, truth.values + noise, 0.0), mask, truth.grid)


def write_scenario(outdir, cfg: SynthConfig, fleet: FleetConfig) -> dict[str, Path]:
    """Write truth/observed STPF files plus a JSON provenance sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    truth = gen_ground_truth(cfg)
    mask = gen_fleet_mask(fleet, cfg.grid, cfg.L)
    obs = make_observed(truth, mask, cfg.obs_noise_sigma, cfg.seed + 1)
    paths = {"truth": outdir / "truth.stpf", "observed": outdir / "observed.stpf",
             "provenance": outdir / "provenance.json"}
    persist_field(truth, paths["truth"])
    persist_field(obs, paths["observed"])
    paths["provenance"].write_text(json.dumps({"synth": cfg.to_json(), "fleet": asdict(fleet)},
                                              indent=2, sort_keys=True, default=list) + "\n")
    return paths
