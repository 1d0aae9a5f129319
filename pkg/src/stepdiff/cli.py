"""Command line: simulate, ingest, split, train, forecast, evaluate, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import os

# single-threaded BLAS keeps runs bit-reproducible; must precede the numpy import
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import ablate as ablate_mod  # noqa: E402
from . import pipeline  # noqa: E402
from .config import ConfigError, RunConfig  # noqa: E402
from .diffusion.core import TrainingDiverged, load_model, save_model  # noqa: E402
from .eval import EmptyEvaluation, report_json, text_table  # noqa: E402
from .grid_data import (FieldFormatError, InsufficientLength, RecordOutOfBounds, discretize,  # noqa: E402
                        load_field, persist_field, read_csv, split_5_1_1)
from .pde import NoObservations, PdeConfigError  # noqa: E402
from .tensor_core.checkpoint import CheckpointFormatError  # noqa: E402

log = logging.getLogger("stepdiff")


class UsageFailure(Exception):
    pass


class DataFailure(Exception):
    pass


DATA_ERRORS = (FieldFormatError, InsufficientLength, RecordOutOfBounds, NoObservations, EmptyEvaluation,
               CheckpointFormatError, FileNotFoundError, TrainingDiverged)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="random seed (overrides config 'seed')")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="stepdiff", description="Physics-regularized diffusion forecasting of gridded pollution.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic scenario (truth, observed, provenance)")
    _common(p)
    p.add_argument("--out", metavar="DIR", default=".", help="output directory")

    p = sub.add_parser("ingest", help="grid raw CSV records into an STPF field")
    _common(p, seed=False)
    p.add_argument("--in", dest="inp", metavar="CSV", required=True, help="raw records CSV")
    p.add_argument("--out", metavar="PATH", required=True, help="output STPF file")
    p.add_argument("--t0", type=int, required=True, help="start of slice 0, unix seconds")
    p.add_argument("--slices", type=int, required=True, help="number of time slices L")

    p = sub.add_parser("split", help="5:1:1 contiguous train/val/test split")
    _common(p, seed=False)
    p.add_argument("--in", dest="inp", metavar="PATH", required=True, help="input STPF field")
    p.add_argument("--out", metavar="DIR", help="output directory (default: next to input)")

    p = sub.add_parser("train", help="pretrain DeepONet and train the denoiser")
    _common(p)
    p.add_argument("--train", metavar="PATH", required=True, help="training split STPF field")
    p.add_argument("--out", metavar="DIR", required=True, help="checkpoint directory")
    p.add_argument("--omega", type=float, help="PDE loss weight")
    p.add_argument("--layers", type=int, help="number of residual attention blocks")
    p.add_argument("--mode", help="integration mode id: diff, 1..10")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--unmasked-loss", action="store_true", help="score unobserved target entries too")

    p = sub.add_parser("forecast", help="forecast windows of a field with a trained model or a baseline")
    _common(p)
    p.add_argument("--model", metavar="DIR", help="checkpoint directory written by train")
    p.add_argument("--in", dest="inp", metavar="PATH", required=True, help="observed STPF field to forecast from")
    p.add_argument("--out", metavar="PATH", required=True, help="forecast STPF field")
    p.add_argument("--method", choices=("model", "persistence", "pde", "deeponet"), default="model",
                   help="forecaster (default: model)")
    p.add_argument("--samples", type=int, help="average this many diffusion draws")
    p.add_argument("--stride", type=int, help="slices between window starts")
    p.add_argument("--jobs", type=int, help="parallel sampling workers")

    p = sub.add_parser("evaluate", help="score a forecast against ground truth")
    _common(p, seed=False)
    p.add_argument("--pred", metavar="PATH", required=True, help="forecast STPF field")
    p.add_argument("--truth", metavar="PATH", required=True, help="ground-truth STPF field")
    p.add_argument("--observed", metavar="PATH", help="observed field: mobile evaluation mask and coverage")
    p.add_argument("--truth-source", choices=("mobile", "station"), help="evaluation protocol")
    p.add_argument("--threshold", type=float, help="daily-mean warning threshold")
    p.add_argument("--start-hour", type=float, default=0.0, help="hour of day of slice 0")
    p.add_argument("--out", metavar="DIR", help="write report.json, report.txt, per_slice.csv here")
    p.add_argument("--jobs", type=int, help="accepted for symmetry; evaluation is vectorized")

    p = sub.add_parser("ablate", help="omega, layer and integration-mode sweeps on a synthetic scenario")
    _common(p)
    p.add_argument("--out", metavar="DIR", required=True, help="output directory")
    p.add_argument("--iters", type=int, help="iterations per smoke run")
    p.add_argument("--omega", type=float, help="omega for the layer and mode sweeps")
    p.add_argument("--layers", type=int, help="layers for the omega and mode sweeps")
    return ap


def _resolve(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for kv in getattr(args, "set", []):
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        rc.set(k.strip(), v.strip())
    flags = {"seed": "seed", "omega": "train.omega", "layers": "train.layers", "mode": "train.mode",
             "iters": "train.n_iter", "samples": "forecast.samples", "stride": "forecast.stride",
             "jobs": "forecast.jobs", "truth_source": "eval.truth_source", "threshold": "eval.threshold"}
    for attr, key in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            if args.command == "ablate" and attr == "iters":
                key = "ablate.n_iter"
            rc.set(key, v)
    if getattr(args, "unmasked_loss", False):
        rc.set("train.masked_loss", False)
    return rc


def _load_field(path):
    try:
        return load_field(path)
    except FileNotFoundError:
        raise DataFailure(f"no such field file: {path}") from None


def cmd_simulate(args, rc):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc, fc = pipeline.synth_configs(rc)
    truth, obs = pipeline.make_scenario(rc)
    persist_field(truth, out / "truth.stpf")
    persist_field(obs, out / "observed.stpf")
    prov = {"synth": sc.to_json(), "fleet": {k: getattr(fc, k) for k in fc.__dataclass_fields__}}
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True, default=list) + "\n")
    rc.save(out / "simulate.cfg")
    print(f"wrote {out / 'truth.stpf'}, {out / 'observed.stpf'} ({truth.L} slices, "
          f"coverage {obs.mask.mean():.3f})")


def cmd_ingest(args, rc):
    recs = read_csv(args.inp)
    f = discretize(recs, pipeline.grid_of(rc), args.t0, args.slices)
    persist_field(f, args.out)
    rc.save(str(args.out) + ".cfg")
    print(f"wrote {args.out}: {len(recs)} records into {f.mask.sum()} cells")


def cmd_split(args, rc):
    f = _load_field(args.inp)
    out = Path(args.out) if args.out else Path(args.inp).parent
    out.mkdir(parents=True, exist_ok=True)
    parts = split_5_1_1(f, rc["window.L1"], rc["window.L2"])
    for name, part in zip(("train", "val", "test"), parts):
        persist_field(part, out / f"{name}.stpf")
    rc.save(out / "split.cfg")
    print("split " + "/".join(str(p.L) for p in parts) + f" slices into {out}")


def cmd_train(args, rc):
    f = _load_field(args.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.save(out / "train.cfg")
    t0 = time.monotonic()
    fitted = pipeline.fit_all(f, rc, curve_path=out / "loss_curve.csv")
    total = time.monotonic() - t0
    save_model(out / "model.stpc", fitted.result, fitted.op, fitted.deeponet_cfg)
    curve = fitted.result.curve
    last = f"{curve[-1][1]:.4f}" if curve else "n/a"
    print(f"final loss {last} after {len(curve)} iterations")
    print(f"deeponet pretraining time: {fitted.deeponet_seconds:.2f} s")
    print(f"diffusion training time: {fitted.result.seconds:.2f} s")
    print(f"training time: {total:.2f} s")


def cmd_forecast(args, rc):
    f = _load_field(args.inp)
    model = None
    if args.model:
        model = load_model(Path(args.model) / "model.stpc")
    elif args.method != "persistence":
        raise UsageFailure(f"--method {args.method} needs --model")
    t0 = time.monotonic()
    pred = pipeline.forecast_field(f, rc["window.L1"], rc["window.L2"], rc["forecast.stride"], args.method,
                                   model, seed=rc["seed"], samples=rc["forecast.samples"],
                                   jobs=rc["forecast.jobs"])
    secs = time.monotonic() - t0
    persist_field(pred, args.out)
    rc.save(str(args.out) + ".cfg")
    print(f"wrote {args.out}: {int(pred.mask.any(axis=(1, 2)).sum())} forecast slices")
    print(f"inference time: {secs:.2f} s")


def cmd_evaluate(args, rc):
    pred = _load_field(args.pred)
    truth = _load_field(args.truth)
    obs = _load_field(args.observed) if args.observed else None
    rep = pipeline.evaluate_fields(pred, truth, obs, rc["eval.truth_source"], rc["eval.threshold"],
                                   rc["eval.n_stations"], args.start_hour, rc["seed"])
    o = rep["overall"]
    rows = [{"scope": "overall", "bucket": "all", "n": o.n, "mae": o.mae, "rmse": o.rmse, "mape": o.mape}]
    for scope, buckets in rep["stratified"].items():
        for name, r in buckets.items():
            rows.append({"scope": scope, "bucket": name, "n": r.n, "mae": r.mae, "rmse": r.rmse, "mape": r.mape})
    table = text_table(rows, ["scope", "bucket", "n", "mae", "rmse", "mape"])
    w = rep["warning"]
    warn = (f"warning threshold {w.threshold:g}: tp={w.tp} fp={w.fp} fn={w.fn} tn={w.tn} "
            f"recall={w.recall:.3f} precision={w.precision:.3f} f1={w.f1:.3f} skipped_days={w.skipped_days}\n")
    print(table + warn, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report_json({k: v for k, v in rep.items() if k != "csv"}))
        (out / "report.txt").write_text(table + warn)
        (out / "per_slice.csv").write_text(rep["csv"])
        rc.save(out / "evaluate.cfg")


def cmd_ablate(args, rc):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.save(out / "ablate.cfg")
    t0 = time.monotonic()
    table = ablate_mod.run_ablation(rc, out)
    print(table, end="")
    print(f"ablation time: {time.monotonic() - t0:.2f} s")


COMMANDS = {"simulate": cmd_simulate, "ingest": cmd_ingest, "split": cmd_split, "train": cmd_train,
            "forecast": cmd_forecast, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def _setup_logging() -> None:
    level = os.environ.get("STEPDIFF_LOG", "error").lower()
    lv = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.ERROR)
    logging.basicConfig(level=lv, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        rc = _resolve(args)
        COMMANDS[args.command](args, rc)
        return 0
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (UsageFailure, ConfigError, PdeConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataFailure, *DATA_ERRORS) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
