"""Parameter studies: omega sweep, depth sweep and the integration-mode matrix."""
from __future__ import annotations

import copy
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig
from .deeponet import train_deeponet
from .diffusion.core import MODES, IntegrationMode
from .eval import metrics, text_table
from .grid_data import sliding_windows, split_5_1_1

log = logging.getLogger(__name__)

COLUMNS = ["group", "setting", "pde_role", "deeponet_role", "pde_fit", "omega", "layers",
           "final_loss", "mae", "rmse", "mape", "seconds"]


def plan(rc: RunConfig) -> list[dict]:
    """Runs of the study, in table order."""
    omega, layers = rc["train.omega"], rc["train.layers"]
    runs = [dict(group="omega", setting=f"omega={w:g}", mode="10", omega=float(w), layers=layers)
            for w in rc["ablate.omegas"]]
    runs += [dict(group="layers", setting=f"layers={n}", mode="10", omega=omega, layers=int(n))
             for n in rc["ablate.layers"]]
    runs += [dict(group="mode", setting=f"mode {k}", mode=k, omega=omega, layers=layers) for k in MODES]
    # role pairs not reached by the numbered modes
    for pde_role, don_role in (("condition", "trainable_condition"), ("diff_loss", "trainable_condition")):
        runs.append(dict(group="matrix", setting=f"{pde_role}+{don_role}",
                         mode=IntegrationMode(pde_role, don_role), omega=omega, layers=layers))
    return runs


def run_ablation(rc: RunConfig, out: Path | None = None) -> str:
    truth, obs = pipeline.make_scenario(rc)
    train_f, _, test_f = split_5_1_1(obs, rc["window.L1"], rc["window.L2"])
    test_truth = split_5_1_1(truth, rc["window.L1"], rc["window.L2"])[2]
    L1, L2 = rc["window.L1"], rc["window.L2"]
    n_iter = rc["ablate.n_iter"]
    windows = sliding_windows(train_f, L1, L2)

    ops: dict[str, object] = {}
    deeponets: dict[str, object] = {}

    def op_for(fit):
        if fit not in ops:
            ops[fit] = pipeline.resolve_operator(fit, train_f, rc)
        return ops[fit]

    def deeponet_for(mode: IntegrationMode):
        if mode.deeponet_role == "none":
            return None
        key = mode.deeponet_loss
        if key not in deeponets:
            deeponets[key] = train_deeponet(windows, pipeline.deeponet_config(rc, mode), B_op=op_for("known").B)
        # trainable runs update their copy in place
        return copy.deepcopy(deeponets[key])

    def score(pred_field):
        m = pred_field.mask & test_f.mask
        return metrics(pred_field.values, test_truth.values, m)

    rows = []
    for run in plan(rc):
        mode = run["mode"] if isinstance(run["mode"], IntegrationMode) else MODES[run["mode"]]
        t0 = time.monotonic()
        fitted = pipeline.fit_all(train_f, rc, mode=mode, deeponet=deeponet_for(mode), op=op_for(mode.pde_fit),
                                  n_iter=n_iter, omega=run["omega"], layers=run["layers"])
        pred = pipeline.forecast_field(test_f, L1, L2, L2, "model", fitted.loaded(), seed=rc["seed"])
        r = score(pred)
        curve = fitted.result.curve
        final = float(np.mean([c[1] for c in curve[-10:]])) if curve else float("nan")
        rows.append(dict(group=run["group"], setting=run["setting"], pde_role=mode.pde_role,
                         deeponet_role=mode.deeponet_role, pde_fit=mode.pde_fit,
                         omega=fitted.result.cfg.effective_omega,
                         layers=run["layers"], final_loss=final, mae=r.mae, rmse=r.rmse, mape=r.mape,
                         seconds=round(time.monotonic() - t0, 2)))
        log.info("ablation %s done", run["setting"])

    known = pipeline.LoadedModel(None, None, op_for("known"), None, None)
    don = deeponet_for(MODES["1"])
    base = {"persistence": (None, "persistence"), "pde": (known, "pde"),
            "deeponet": (pipeline.LoadedModel(None, don, op_for("known"), None, None), "deeponet")}
    for name, (model, method) in base.items():
        r = score(pipeline.forecast_field(test_f, L1, L2, L2, method, model))
        rows.append(dict(group="baseline", setting=name, pde_role="-", deeponet_role="-", pde_fit="-",
                         omega=float("nan"), layers=0, final_loss=float("nan"), mae=r.mae, rmse=r.rmse,
                         mape=r.mape, seconds=0.0))

    table = text_table(rows, COLUMNS) + "\n" + "\n".join(directional(rows)) + "\n"
    if out is not None:
        out = Path(out)
        (out / "ablate.txt").write_text(table)
        lines = [",".join(COLUMNS)] + [",".join(str(r[c]) for c in COLUMNS) for r in rows]
        (out / "ablate.csv").write_text("\n".join(lines) + "\n")
        clean = [{k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()}
                 for r in rows]
        (out / "ablate.json").write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")
    return table


def directional(rows: list[dict]) -> list[str]:
    """Report (not assert) the expected orderings by test MAE."""
    by = {(r["group"], r["setting"]): r["mae"] for r in rows}
    out = []
    for label, a, b in (("omega=1 beats omega=0", ("omega", "omega=1"), ("omega", "omega=0")),
                        ("mode 10 beats mode 1", ("mode", "mode 10"), ("mode", "mode 1"))):
        if a in by and b in by:
            verdict = "holds" if by[a] < by[b] else "does not hold"
            out.append(f"{label}: MAE {by[a]:.4f} vs {by[b]:.4f} -> {verdict}")
    return out
