"""Forecast scoring: point metrics, stratified buckets, daily warning decisions."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

MAPE_EPS = 1e-6
TIME_BUCKETS = (("00-06", 0, 6), ("06-12", 6, 12), ("12-18", 12, 18), ("18-24", 18, 24))
COVERAGE_BUCKETS = (("[0.0,0.2]", -np.inf, 0.2), ("(0.2,0.4]", 0.2, 0.4),
                    ("(0.4,0.6]", 0.4, 0.6), ("(0.6,1.0]", 0.6, 1.0))


class EmptyEvaluation(ValueError):
    pass


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float
    n: int
    n_mape: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WarningReport:
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    recall: float
    precision: float
    f1: float
    skipped_days: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(pred, truth, mask=None) -> MetricReport:
    """MAE, RMSE and MAPE over entries with mask=1.

    MAPE skips entries whose truth is within 1e-6 of zero; ``n_mape`` counts
    the entries it did use (MAPE is nan if there are none).
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    m = np.ones(pred.shape, bool) if mask is None else np.asarray(mask).astype(bool)
    if m.shape != pred.shape:
        raise ValueError(f"mask shape {m.shape} != {pred.shape}")
    n = int(m.sum())
    if n == 0:
        raise EmptyEvaluation("no entries to evaluate (mask is empty)")
    err = (pred - truth)[m]
    t = truth[m]
    ok = np.abs(t) >= MAPE_EPS
    mape = float(np.mean(np.abs(err[ok]) / np.abs(t[ok]))) if ok.any() else float("nan")
    return MetricReport(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err))), mape, n, int(ok.sum()))


def slice_hours(n_slices: int, slice_length: float = 3600.0, start_hour: float = 0.0) -> np.ndarray:
    return (start_hour + np.arange(n_slices) * slice_length / 3600.0) % 24.0


def stratified(pred, truth, mask, coverage, slice_length: float = 3600.0, start_hour: float = 0.0,
               hours=None) -> dict[str, dict[str, MetricReport]]:
    """Bucket metrics by hour of day and by per-cell temporal coverage.

    ``pred``, ``truth``, ``mask`` are (L, X, Y); ``coverage`` is (X, Y).
    ``hours`` overrides the per-slice hour of day. Empty buckets are omitted.
    """
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    mask = np.asarray(mask).astype(bool)
    cov = np.asarray(coverage, float)
    L = pred.shape[0]
    hrs = slice_hours(L, slice_length, start_hour) if hours is None else np.asarray(hours, float)
    out: dict[str, dict[str, MetricReport]] = {"time": {}, "coverage": {}}
    for name, lo, hi in TIME_BUCKETS:
        sel = mask & ((hrs >= lo) & (hrs < hi))[:, None, None]
        if sel.any():
            out["time"][name] = metrics(pred, truth, sel)
    for name, lo, hi in COVERAGE_BUCKETS:
        sel = mask & ((cov > lo) & (cov <= hi))[None]
        if sel.any():
            out["coverage"][name] = metrics(pred, truth, sel)
    return out


def daily_means(values, mask, slices_per_day: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Grid-wide daily means: spatial mean over evaluated cells, then over the day's slices.

    Returns (means, valid) per complete day; a day is invalid if it has no
    evaluated entries at all.
    """
    values = np.asarray(values, float)
    mask = np.asarray(mask).astype(bool)
    n_days = values.shape[0] // slices_per_day
    means = np.zeros(n_days)
    valid = np.zeros(n_days, bool)
    for d in range(n_days):
        sl = slice(d * slices_per_day, (d + 1) * slices_per_day)
        v, m = values[sl], mask[sl]
        per_slice = [v[i][m[i]].mean() for i in range(len(v)) if m[i].any()]
        if per_slice:
            means[d] = float(np.mean(per_slice))
            valid[d] = True
    return means, valid


def warning_counts(tp: int, fp: int, fn: int, tn: int = 0, threshold: float = 25.0,
                   skipped: int = 0) -> WarningReport:
    recall = tp / (tp + fn) if tp + fn else float("nan")
    precision = tp / (tp + fp) if tp + fp else float("nan")
    if tp + fn and tp + fp and recall + precision > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = float("nan")
    return WarningReport(threshold, tp, fp, fn, tn, recall, precision, f1, skipped)


def warning_eval(pred_daily, truth_daily, threshold: float = 25.0, valid=None) -> WarningReport:
    """Binarize daily means at ``threshold`` (>= counts as a pollution day)."""
    p = np.asarray(pred_daily, float)
    t = np.asarray(truth_daily, float)
    ok = np.ones(t.shape, bool) if valid is None else np.asarray(valid, bool)
    ok = ok & np.isfinite(t)
    pb, tb = p[ok] >= threshold, t[ok] >= threshold
    return warning_counts(int(np.sum(pb & tb)), int(np.sum(pb & ~tb)), int(np.sum(~pb & tb)),
                          int(np.sum(~pb & ~tb)), threshold, int(np.sum(~ok)))


def station_mask(shape, n_stations: int = 4, seed: int = 0) -> np.ndarray:
    """Fixed set of designated cells, observed at every slice."""
    L, X, Y = shape
    rng = np.random.default_rng(seed)
    cells = rng.choice(X * Y, size=min(n_stations, X * Y), replace=False)
    m = np.zeros((X * Y,), bool)
    m[cells] = True
    return np.broadcast_to(m.reshape(X, Y), shape).copy()


def persistence_forecast(v_co, m_co, horizon: int) -> np.ndarray:
    """Repeat the last observed history value of each cell.

    Cells never observed in the history take the mean of the last slice that
    has observations (zeros if the history is empty).
    """
    v_co = np.asarray(v_co, float)
    m_co = np.asarray(m_co).astype(bool)
    L1 = v_co.shape[0]
    last = np.zeros(v_co.shape[1:])
    seen = np.zeros(v_co.shape[1:], bool)
    fill = 0.0
    for l in range(L1):
        last = np.where(m_co[l], v_co[l], last)
        seen |= m_co[l]
        if m_co[l].any():
            fill = float(v_co[l][m_co[l]].mean())
    last = np.where(seen, last, fill)
    return np.broadcast_to(last, (horizon,) + last.shape).copy()


# --- output formats --------------------------------------------------------

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    return x


def report_json(obj) -> str:
    def enc(o):
        if hasattr(o, "to_dict"):
            return o.to_dict()
        if isinstance(o, dict):
            return {k: enc(v) for k, v in o.items()}
        return o
    return json.dumps(_clean(enc(obj)), indent=2, sort_keys=True) + "\n"


def text_table(rows: list[dict], columns: list[str] | None = None, floatfmt: str = ".4f") -> str:
    """Aligned-column plain-text table."""
    if not rows:
        return ""
    columns = columns or list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return "nan" if not math.isfinite(v) else format(v, floatfmt)
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    # numbers right-aligned, text left-aligned
    numeric = [all(isinstance(r.get(c), (int, float)) for r in rows) for c in columns]
    lines = ["  ".join(c.rjust(w) if num else c.ljust(w) for c, w, num in zip(columns, widths, numeric)).rstrip(),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(row, widths, numeric)).rstrip()
              for row in cells]
    return "\n".join(lines) + "\n"


def per_slice_csv(pred, truth, mask) -> str:
    """Plot-ready ``slice,metric,value`` rows; slices without entries are skipped."""
    pred = np.asarray(pred, float)
    truth = np.asarray(truth, float)
    mask = np.asarray(mask).astype(bool)
    lines = ["slice,metric,value"]
    for l in range(pred.shape[0]):
        if not mask[l].any():
            continue
        r = metrics(pred[l], truth[l], mask[l])
        for name in ("mae", "rmse", "mape"):
            v = getattr(r, name)
            lines.append(f"{l},{name},{'nan' if not math.isfinite(v) else format(v, '.10g')}")
    return "\n".join(lines) + "\n"
