"""Replicated experiments: reconstruction accuracy and ITE error tables.

A benchmark is a grid of scenarios, methods and seeds. Every (scenario, seed)
cell draws one training set and one held-out interventional test set, runs
each method on them and records its metrics. Cells are independent and may
run in parallel; results are collected in grid order so reports do not
depend on the number of workers.
"""

from __future__ import annotations

import csv
import logging
import os
import traceback
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from . import ivreg
from .dataset import ScenarioSpec, generate, generate_test, true_ite
from .meta_em import MetaConfig, run as run_meta
from .metrics import reconstruction_accuracy

log = logging.getLogger(__name__)

# name -> (variant, K known?) for the reconstructed-instrument methods
GIV_METHODS = {
    "GIV_KM": ("meta-km", False),
    "GIV_KM*": ("meta-km", True),
    "GIV_EM": ("meta-em", False),
    "GIV_EM*": ("meta-em", True),
    "PlainEM*": ("em", True),
}
METHODS = ("NoneIV", "GIV_KM", "GIV_KM*", "GIV_EM", "TrueIV")
ALL_METHODS = ("NoneIV", "TrueIV") + tuple(GIV_METHODS)

PRESETS = {
    "table1-linear-3-3": dict(scenarios=[("linear", 3, 3)], methods=METHODS),
    "table3-settings": dict(scenarios=[("linear", 2, 5), ("linear", 3, 5), ("linear", 5, 5),
                                       ("linear", 3, 10)], methods=METHODS),
    "ablation-data-2-5": dict(scenarios=[(k, 2, 5) for k in ("linear", "poly", "sin", "sigmoid", "abs")],
                              methods=("PlainEM*", "GIV_EM*")),
    "fig4-mmd": dict(scenarios=[("linear", 2, 5), ("linear", 3, 3)], methods=("GIV_EM",)),
}


@dataclass(frozen=True)
class RegressionOptions:
    p: int = 2
    treatment_degree: int = 2
    interactions: bool = True
    policy: str = "observed"


@dataclass
class ReportRow:
    scenario: str
    method: str
    metric: str
    mean: float
    std: Optional[float]
    n_reps: int


@dataclass
class BenchmarkReport:
    rows: list
    raw: dict                      # (scenario, method, metric) -> list of (seed, value)
    failures: list = field(default_factory=list)
    mmd_curves: list = field(default_factory=list)
    ite_curves: list = field(default_factory=list)

    def row(self, scenario: str, method: str, metric: str) -> ReportRow:
        for r in self.rows:
            if (r.scenario, r.method, r.metric) == (scenario, method, metric):
                return r
        raise KeyError((scenario, method, metric))

    def values(self, scenario: str, method: str, metric: str) -> np.ndarray:
        return np.array([v for _, v in self.raw.get((scenario, method, metric), [])], dtype=float)


def _summary(values) -> tuple:
    v = np.asarray(values, dtype=float)
    std = float(np.std(v, ddof=1)) if len(v) >= 2 else None
    return float(np.mean(v)), std


def aggregate(records) -> BenchmarkReport:
    """Fold per-cell records into mean/std rows, keeping the raw values."""
    raw, failures, mmd_curves, ite_curves = {}, [], [], []
    for rec in records:
        failures.extend(rec["failures"])
        mmd_curves.extend(rec["mmd_curves"])
        ite_curves.extend(rec["ite_curves"])
        for method, metrics in rec["metrics"].items():
            for metric, value in metrics.items():
                raw.setdefault((rec["scenario"], method, metric), []).append((rec["seed"], value))
    rows = []
    for (scenario, method, metric), pairs in raw.items():
        finite = [v for _, v in pairs if np.isfinite(v)]
        if not finite:
            continue
        mean, std = _summary(finite)
        rows.append(ReportRow(scenario, method, metric, mean, std, len(finite)))
    return BenchmarkReport(rows, raw, failures, mmd_curves, ite_curves)


def _accuracy(z_hat, z_true) -> float:
    K = int(max(z_hat.max(), z_true.max())) + 1
    return reconstruction_accuracy(z_hat, z_true, K)


def run_cell(spec: ScenarioSpec, methods, meta: MetaConfig = MetaConfig(),
             reg: RegressionOptions = RegressionOptions(), keep_curves: bool = False) -> dict:
    """Run every method on one replication. Method failures are recorded, not raised."""
    train_set = generate(spec)
    test_set = generate_test(spec)
    rec = {"scenario": spec.name, "seed": spec.seed, "metrics": {}, "failures": [],
           "mmd_curves": [], "ite_curves": []}
    reg_kw = dict(p=reg.p, treatment_degree=reg.treatment_degree, interactions=reg.interactions)
    t_eval = ivreg.treatment_points(test_set, reg.policy)
    for method in methods:
        try:
            metrics = {}
            if method == "NoneIV":
                z = None
            elif method == "TrueIV":
                z = train_set.z_true
            else:
                variant, known = GIV_METHODS[method]
                cfg = replace(meta, variant=variant, K=spec.k_true if known else "auto",
                              seed=meta.seed + spec.seed)
                res = run_meta(train_set, cfg)
                z = res.z
                metrics["accuracy"] = _accuracy(res.z_argmax, train_set.z_true)
                metrics["accuracy_sampled"] = _accuracy(res.z, train_set.z_true)
                metrics["K"] = float(res.K)
                metrics["rounds"] = float(len(res.trace) - 1)
                for K, v in sorted(res.mmd_curve.items()):
                    rec["mmd_curves"].append((spec.name, method, spec.seed, K, v, K == res.selected_K))
            model = ivreg.fit_dataset(train_set, z, **reg_kw)
            metrics["ite_mse"] = ivreg.ite_mse(model, test_set, reg.policy)
            metrics["first_stage_r2"] = model.first_stage_r2
            if keep_curves:
                tau = ivreg.predict_ite(model, t_eval).tau_hat
                truth = test_set.ite if reg.policy == "observed" else true_ite(t_eval)
                order = np.argsort(truth, kind="stable")
                rec["ite_curves"].extend((spec.name, method, spec.seed, r, float(truth[i]), float(tau[i]))
                                         for r, i in enumerate(order))
            rec["metrics"][method] = metrics
        except Exception as exc:  # one bad cell must not sink the whole grid
            log.warning("%s seed %d %s failed: %s", spec.name, spec.seed, method, exc)
            rec["failures"].append({"scenario": spec.name, "seed": spec.seed, "method": method,
                                    "error": f"{type(exc).__name__}: {exc}",
                                    "traceback": traceback.format_exc()})
    return rec


def benchmark(scenarios, methods=METHODS, seeds=range(10), meta: MetaConfig = MetaConfig(),
              reg: RegressionOptions = RegressionOptions(), jobs: int = 1,
              curve_seeds: int = 1) -> BenchmarkReport:
    """Run the scenario x seed grid. Sorted-ITE curves are kept for the first
    ``curve_seeds`` seeds of each scenario."""
    scenarios = list(scenarios)
    seeds = list(seeds)
    if not scenarios or not seeds or not methods:
        raise ValueError("benchmark grid is empty")
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; expected a subset of {ALL_METHODS}")
    cells = [(replace(sc, seed=s), j < curve_seeds) for sc in scenarios for j, s in enumerate(seeds)]
    for spec, _ in cells:
        spec.validate()
    work = (delayed(run_cell)(spec, tuple(methods), meta, reg, keep) for spec, keep in cells)
    records = Parallel(n_jobs=jobs)(work) if jobs != 1 else [run_cell(s, tuple(methods), meta, reg, k)
                                                              for s, k in cells]
    return aggregate(records)


def preset_scenarios(name: str, n: int = 3000) -> tuple:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return [ScenarioSpec(kind=k, k_true=K, m_x=m, n=n) for k, K, m in p["scenarios"]], p["methods"]


# -- report files ------------------------------------------------------------

def _num(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(report: BenchmarkReport, directory) -> None:
    """summary.csv, raw.csv, table.txt, mmd_curves.csv, ite_curves.csv and
    failures.csv (only when something failed)."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "metric", "mean", "std", "n_reps"])
        for r in report.rows:
            w.writerow([r.scenario, r.method, r.metric, _num(r.mean), _num(r.std), r.n_reps])
    with open(os.path.join(directory, "raw.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "metric", "seed", "value"])
        for (scenario, method, metric), pairs in report.raw.items():
            for seed, v in pairs:
                w.writerow([scenario, method, metric, seed, _num(v)])
    with open(os.path.join(directory, "table.txt"), "w") as fh:
        fh.write(render_table(report))
    with open(os.path.join(directory, "mmd_curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "seed", "K", "mmd", "selected"])
        for sc, m, seed, K, v, sel in report.mmd_curves:
            w.writerow([sc, m, seed, K, _num(v), int(sel)])
    with open(os.path.join(directory, "ite_curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "method", "seed", "rank", "tau_true", "tau_hat"])
        for sc, m, seed, r, t, h in report.ite_curves:
            w.writerow([sc, m, seed, r, _num(t), _num(h)])
    if report.failures:
        with open(os.path.join(directory, "failures.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "seed", "method", "error"])
            for f in report.failures:
                w.writerow([f["scenario"], f["seed"], f["method"], f["error"]])


def render_table(report: BenchmarkReport, metrics=("ite_mse", "accuracy")) -> str:
    """Plain-text table: one line per scenario and method, ``mean(std)`` cells."""
    scenarios = list(dict.fromkeys(r.scenario for r in report.rows))
    methods = list(dict.fromkeys(r.method for r in report.rows))
    index = {(r.scenario, r.method, r.metric): r for r in report.rows}

    def cell(r):
        if r is None:
            return "-"
        return f"{r.mean:.4f}" if r.std is None else f"{r.mean:.4f}({r.std:.4f})"

    header = ["scenario", "method"] + list(metrics)
    lines = [[sc, m] + [cell(index.get((sc, m, k))) for k in metrics]
             for sc in scenarios for m in methods
             if any((sc, m, k) in index for k in metrics)]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    fmt = lambda row: "  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip()
    out = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(l) for l in lines]
    return "\n".join(out) + "\n"
