"""Gridded masked fields built from mobile-sensor records.

A field is a pair of ``(L, X, Y)`` arrays: measured values (µg/m³) and a
boolean observation mask. Unobserved entries hold the sentinel ``0.0``.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8
FIELD_MAGIC = b"STPF"
FIELD_VERSION = 1


class FieldFormatError(ValueError):
    pass


class FieldCorruptionError(FieldFormatError):
    pass


class RecordOutOfBounds(ValueError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index


class InsufficientLength(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    cell_size: float = 500.0
    slice_length: float = 3600.0
    X: int = 10
    Y: int = 10

    def __post_init__(self):
        if self.X < 1 or self.Y < 1:
            raise ValueError(f"grid needs X, Y >= 1 (got {self.X}, {self.Y})")
        if not (self.cell_size > 0 and self.slice_length > 0):
            raise ValueError("cell_size and slice_length must be positive")

    def cell_of(self, lon: float, lat: float) -> tuple[float, float]:
        """Fractional (x, y) cell coordinates via a local equirectangular projection."""
        k = math.pi / 180.0 * EARTH_RADIUS_M
        east = (lon - self.origin_lon) * k * math.cos(math.radians(self.origin_lat))
        north = (lat - self.origin_lat) * k
        return east / self.cell_size, north / self.cell_size


@dataclass(frozen=True)
class RawRecord:
    device_id: str
    timestamp: int
    lon: float
    lat: float
    value: float


@dataclass
class MaskedField:
    values: np.ndarray
    mask: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 3:
            raise ValueError(f"values {self.values.shape} and mask {self.mask.shape} must be equal rank-3 shapes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        self.values = np.where(self.mask, self.values, 0.0)

    @property
    def L(self) -> int:
        return self.values.shape[0]

    def slice(self, start: int, stop: int) -> "MaskedField":
        return MaskedField(self.values[start:stop].copy(), self.mask[start:stop].copy(), self.grid)

    def __eq__(self, other):
        return (isinstance(other, MaskedField) and self.grid == other.grid
                and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes()
                and np.array_equal(self.mask, other.mask))


@dataclass
class WindowSample:
    v_co: np.ndarray
    m_co: np.ndarray
    v_ta: np.ndarray
    m_ta: np.ndarray
    v_de: np.ndarray | None = None
    start: int = 0

    @property
    def m_full(self) -> np.ndarray:
        return np.concatenate([self.m_co, self.m_ta], axis=0)

    def for_forecast(self) -> "WindowSample":
        """Copy with the future hidden: targets zeroed, target mask all zeros."""
        return WindowSample(self.v_co, self.m_co, np.zeros_like(self.v_ta),
                            np.zeros_like(self.m_ta), None, self.start)


def discretize(records, grid: GridSpec, t0: int, L: int) -> MaskedField:
    """Average records falling in each (slice, cell); floor assignment at borders."""
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    total = np.zeros((L, grid.X, grid.Y))
    count = np.zeros((L, grid.X, grid.Y), dtype=np.int64)
    for i, r in enumerate(records):
        if not (r.value >= 0 and math.isfinite(r.value)):
            raise RecordOutOfBounds(i, f"value {r.value} is not a non-negative number")
        l = math.floor((r.timestamp - t0) / grid.slice_length)
        if not 0 <= l < L:
            raise RecordOutOfBounds(i, f"timestamp {r.timestamp} outside [{t0}, {t0 + L * grid.slice_length})")
        fx, fy = grid.cell_of(r.lon, r.lat)
        x, y = math.floor(fx), math.floor(fy)
        if not (0 <= x < grid.X and 0 <= y < grid.Y):
            raise RecordOutOfBounds(i, f"position ({r.lon}, {r.lat}) outside the grid")
        total[l, x, y] += r.value
        count[l, x, y] += 1
    mask = count > 0
    values = np.divide(total, count, out=np.zeros_like(total), where=mask)
    return MaskedField(values, mask, grid)


def read_csv(path) -> list[RawRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"device_id", "timestamp", "lon", "lat", "value"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise FieldFormatError(f"CSV header must contain {sorted(need)}")
        return [RawRecord(row["device_id"], int(row["timestamp"]), float(row["lon"]),
                          float(row["lat"]), float(row["value"])) for row in reader]


def coverage_stats(f: MaskedField) -> tuple[np.ndarray, np.ndarray]:
    """Per-slice spatial coverage (L,) and per-cell temporal coverage (X, Y)."""
    m = f.mask.astype(np.float64)
    return m.mean(axis=(1, 2)), m.mean(axis=0)


def sliding_windows(f: MaskedField, L1: int = 12, L2: int = 12) -> list[WindowSample]:
    span = L1 + L2
    if f.L < span:
        raise InsufficientLength(f"field has {f.L} slices, windows need {span}")
    out = []
    for s in range(f.L - span + 1):
        v, m = f.values[s:s + span], f.mask[s:s + span]
        out.append(WindowSample(v[:L1].copy(), m[:L1].copy(), v[L1:].copy(), m[L1:].copy(), start=s))
    return out


def split_5_1_1(f: MaskedField, L1: int = 12, L2: int = 12) -> tuple[MaskedField, MaskedField, MaskedField]:
    """Contiguous 5:1:1 time split; the remainder of L/7 goes to train."""
    part = f.L // 7
    n_train = f.L - 2 * part
    if f.L < 7 * (L1 + L2) / 5:
        log.warning("field of %d slices is short for %d+%d windows after a 5:1:1 split", f.L, L1, L2)
    return f.slice(0, n_train), f.slice(n_train, n_train + part), f.slice(n_train + part, f.L)


def concat_fields(fields: list[MaskedField]) -> MaskedField:
    return MaskedField(np.concatenate([g.values for g in fields]),
                       np.concatenate([g.mask for g in fields]), fields[0].grid)


_HEADER = struct.Struct("<4sIIII4d")


def field_bytes(f: MaskedField) -> bytes:
    L, X, Y = f.values.shape
    g = f.grid
    head = _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, L, X, Y,
                        g.origin_lat, g.origin_lon, g.cell_size, g.slice_length)
    return head + f.values.astype("<f8").tobytes() + f.mask.astype(np.uint8).tobytes()


def field_from_bytes(buf: bytes) -> MaskedField:
    if len(buf) < 4 or buf[:4] != FIELD_MAGIC:
        raise FieldFormatError("not an STPF field file (bad magic)")
    if len(buf) < _HEADER.size:
        raise FieldCorruptionError("truncated STPF header")
    _, version, L, X, Y, lat, lon, dn, dl = _HEADER.unpack_from(buf)
    if version != FIELD_VERSION:
        raise FieldFormatError(f"unsupported STPF version {version}")
    n = L * X * Y
    if len(buf) != _HEADER.size + 9 * n:
        raise FieldCorruptionError(f"STPF payload is {len(buf) - _HEADER.size} bytes, expected {9 * n}")
    values = np.frombuffer(buf, "<f8", n, _HEADER.size).reshape(L, X, Y).astype(np.float64)
    mask = np.frombuffer(buf, np.uint8, n, _HEADER.size + 8 * n).reshape(L, X, Y)
    if mask.max(initial=0) > 1:
        raise FieldCorruptionError("mask bytes must be 0 or 1")
    grid = GridSpec(origin_lat=lat, origin_lon=lon, cell_size=dn, slice_length=dl, X=X, Y=Y)
    return MaskedField(values, mask.astype(bool), grid)


def persist_field(f: MaskedField, path) -> None:
    Path(path).write_bytes(field_bytes(f))


def load_field(path) -> MaskedField:
    return field_from_bytes(Path(path).read_bytes())
