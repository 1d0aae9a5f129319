"""Flat ``key = value`` run configuration with dotted keys.

Values are parsed by the type of the key's default. Lists are comma separated.
Unknown keys are rejected; the resolved configuration can be written back in
the same format.
"""
from __future__ import annotations

import copy
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "grid.X": 10,
    "grid.Y": 10,
    "grid.cell_size": 500.0,
    "grid.slice_length": 3600.0,
    "grid.origin_lat": 31.65,
    "grid.origin_lon": 120.75,
    "synth.L": 336,
    "synth.K": 5.0,
    "synth.P_x": 0.0,
    "synth.P_y": 0.0,
    "synth.source": 0.0,
    # uniform | ridge (source scaled by 1 + 0.5 cos(2 pi y / Y))
    "synth.source_profile": "uniform",
    "synth.source_diurnal": 0.0,
    "synth.init_mode": "smooth-random",
    "synth.base_level": 40.0,
    "synth.obs_noise_sigma": 0.0,
    "fleet.n_vehicles": 6,
    "fleet.mode": "free-car",
    "fleet.route_period": 1,
    "fleet.route_length": 10,
    "fleet.cells_per_slice": 12,
    "fleet.active_hours": list(range(24)),
    "fleet.start_hour": 0,
    "window.L1": 12,
    "window.L2": 12,
    "deeponet.p": 64,
    "deeponet.hidden": [256, 256],
    "deeponet.epochs": 200,
    "deeponet.lr": 1e-3,
    "deeponet.batch_size": 16,
    "deeponet.omega": 1.0,
    "train.mode": "10",
    "train.omega": 1.0,
    "train.n_iter": 2000,
    "train.batch_size": 1,
    "train.lr": 1e-3,
    "train.T": 50,
    "train.beta_min": 1e-4,
    "train.beta_max": 0.5,
    "train.layers": 4,
    "train.channels": 64,
    "train.heads": 8,
    "train.ff_dim": 64,
    "train.masked_loss": True,
    "forecast.samples": 1,
    "forecast.stride": 12,
    "forecast.jobs": 1,
    "eval.truth_source": "mobile",
    "eval.n_stations": 4,
    "eval.threshold": 25.0,
    "ablate.n_iter": 50,
    "ablate.omegas": [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
    "ablate.layers": [2, 4, 6, 8, 10],
}


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            kind = type(default[0]) if default else float
            return [kind(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Resolved configuration: defaults, then a config file, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    @classmethod
    def parse_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{no}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, val)
            except ConfigError as e:
                raise ConfigError(f"{source}:{no}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.parse_text(p.read_text(), str(p))

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())
