"""Command-line entry point: ``metaem generate | fit | evaluate | benchmark``.

Every command writes a ``manifest.json`` next to its outputs holding the fully
resolved configuration. Exit status is 0 on success, 1 for usage errors and 2
when the work itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import __version__, benchmark as bench, dataset as ds, ivreg, meta_em
from .dataset import SCENARIOS, ScenarioSpec
from .meta_em import MetaConfig
from .metrics import reconstruction_accuracy
from .representation import MAP_KINDS

log = logging.getLogger("metaem")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(out, command, config, **extra) -> None:
    _write_json(os.path.join(out, "manifest.json"),
                {"command": command, "version": __version__, "config": config, **extra})


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _parse_k(value: str):
    if value == "auto":
        return "auto"
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a positive integer, got {value!r}") from None
    if k < 1:
        raise argparse.ArgumentTypeError("K must be >= 1")
    return k


def _meta_config(args, file_cfg: dict) -> MetaConfig:
    """Defaults, then the config file's ``meta``/``rep`` sections, then flags."""
    meta_doc = dict(file_cfg.get("meta", {}))
    rep_doc = dict(file_cfg.get("rep", {}))
    for flag, key in (("variant", "variant"), ("k", "K"), ("rounds", "outer_rounds"),
                      ("map_kind", "map_kind"), ("seed", "seed"), ("restarts", "em_restarts")):
        value = getattr(args, flag, None)
        if value is not None:
            meta_doc[key] = value
    for flag, key in (("epochs", "epochs"), ("learning_rate", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            rep_doc[key] = value
    try:
        cfg = MetaConfig.from_json({**meta_doc, "rep": rep_doc})
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


def _reg_options(args, file_cfg: dict) -> bench.RegressionOptions:
    doc = dict(file_cfg.get("regression", {}))
    if getattr(args, "degree", None) is not None:
        doc["p"] = args.degree
    if getattr(args, "policy", None) is not None:
        doc["policy"] = args.policy
    try:
        return bench.RegressionOptions(**doc)
    except TypeError as exc:
        raise UsageError(f"invalid regression options: {exc}") from None


# -- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = ScenarioSpec(kind=args.scenario, k_true=args.k, m_x=args.mx, n=args.n,
                        sigma_xe=args.sigma, seed=args.seed)
    try:
        spec.validate()
    except ds.DataError as exc:
        raise UsageError(str(exc)) from None
    data = ds.generate(spec)
    ds.save(data, args.out)
    _manifest(args.out, "generate", {"scenario": asdict(spec)}, name=spec.name)
    print(f"wrote {spec.name} (n={data.n}) to {args.out}")
    return EXIT_OK


def _load_dataset(path) -> ds.Dataset:
    if not os.path.isdir(path):
        raise ds.DataError(f"input directory {path} does not exist")
    return ds.load(path)


def cmd_fit(args) -> int:
    cfg = _meta_config(args, _load_config(args.config))
    data = _load_dataset(args.data)
    result = meta_em.run(data, cfg)
    meta_em.save_result(result, args.out)
    summary = {"K": result.K, "selected_K": result.selected_K, "rounds": len(result.trace) - 1,
               "variant": result.variant}
    if data.z_true is not None:
        K = max(result.K, data.k_true)
        summary["accuracy_argmax"] = reconstruction_accuracy(result.z_argmax, data.z_true, K)
        summary["accuracy_sampled"] = reconstruction_accuracy(result.z, data.z_true, K)
    _manifest(args.out, "fit", {"data": args.data, "meta": cfg.to_json()}, result=summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    reg = _reg_options(args, _load_config(args.config))
    data = _load_dataset(args.data)
    if args.instrument == "none":
        z = None
    elif args.instrument == "true":
        if data.z_true is None:
            raise UsageError("--instrument true needs a dataset with a label column")
        z = data.z_true
    else:
        if args.labels is None:
            raise UsageError("--instrument giv needs --labels pointing at a fit output directory")
        if not os.path.isdir(args.labels):
            raise ds.DataError(f"labels directory {args.labels} does not exist")
        z = meta_em.load_labels(args.labels, args.label_mode)
        if len(z) != data.n:
            raise ds.DataError(f"{args.labels} holds {len(z)} labels for {data.n} units")
    if args.test is not None:
        test = _load_dataset(args.test)
    elif data.synthetic:
        test = ds.generate_test(ds.spec_from_meta(data.meta), n=data.n)
    else:
        test = data
    model = ivreg.fit_dataset(data, z, p=reg.p, treatment_degree=reg.treatment_degree,
                              interactions=reg.interactions)
    os.makedirs(args.out, exist_ok=True)
    model.save(os.path.join(args.out, "model.json"))
    metrics = {"instrument": args.instrument, "first_stage_r2": model.first_stage_r2,
               "treatment_coef": model.treatment_coef.tolist(), "dependent": model.dependent}
    if test.synthetic or test.ite is not None:
        metrics["ite_mse"] = ivreg.ite_mse(model, test, reg.policy)
        ivreg.write_predictions(model, test, os.path.join(args.out, "predictions.csv"), reg.policy)
    _write_json(os.path.join(args.out, "metrics.json"), metrics)
    _manifest(args.out, "evaluate", {"data": args.data, "test": args.test, "labels": args.labels,
                                     "label_mode": args.label_mode, "instrument": args.instrument,
                                     "regression": asdict(reg)})
    print(json.dumps({k: metrics[k] for k in ("instrument", "ite_mse", "first_stage_r2") if k in metrics},
                     sort_keys=True))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if args.jobs == 0:
        raise UsageError("--jobs must be non-zero")
    file_cfg = _load_config(args.config)
    cfg = _meta_config(args, file_cfg)
    reg = _reg_options(args, file_cfg)
    scenarios, methods = bench.preset_scenarios(args.preset, n=args.n)
    if args.methods:
        methods = tuple(args.methods)
    seeds = list(range(args.seed0, args.seed0 + args.reps))
    report = bench.benchmark(scenarios, methods, seeds, meta=replace(cfg, seed=0), reg=reg, jobs=args.jobs)
    bench.write_report(report, args.out)
    _manifest(args.out, "benchmark",
              {"preset": args.preset, "scenarios": [asdict(s) for s in scenarios], "methods": list(methods),
               "seeds": seeds, "meta": replace(cfg, seed=0).to_json(), "regression": asdict(reg)},
              failures=len(report.failures))
    sys.stdout.write(bench.render_table(report))
    if report.failures:
        print(f"{len(report.failures)} cell(s) failed; see failures.csv", file=sys.stderr)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metaem", description="Latent group instruments for treatment effect estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="draw a synthetic multi-source dataset")
    g.add_argument("--scenario", choices=SCENARIOS, default="linear")
    g.add_argument("--k", type=int, default=3, help="number of latent groups (>= 2)")
    g.add_argument("--mx", type=int, default=3, help="covariate dimension")
    g.add_argument("--n", type=int, default=3000)
    g.add_argument("--sigma", type=float, default=0.1, help="covariance between each covariate and the confounder")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    def meta_flags(q):
        q.add_argument("--config", help="JSON file with 'meta', 'rep' and 'regression' sections")
        q.add_argument("--rounds", type=int, help="maximum alternation rounds")
        q.add_argument("--map-kind", dest="map_kind", choices=MAP_KINDS)
        q.add_argument("--restarts", type=int, help="EM restarts per distribution step")
        q.add_argument("--epochs", type=int, help="representation epochs per round")
        q.add_argument("--learning-rate", dest="learning_rate", type=float)

    f = sub.add_parser("fit", help="reconstruct the group instrument")
    f.add_argument("--data", required=True, help="dataset directory")
    f.add_argument("--variant", choices=meta_em.VARIANTS)
    f.add_argument("--k", type=_parse_k, help="'auto' or the number of groups")
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    meta_flags(f)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="two-stage least squares and ITE error")
    e.add_argument("--data", required=True, help="training dataset directory")
    e.add_argument("--instrument", choices=("none", "true", "giv"), required=True)
    e.add_argument("--labels", help="fit output directory (for --instrument giv)")
    e.add_argument("--label-mode", dest="label_mode", choices=("sampled", "argmax"), default="sampled")
    e.add_argument("--test", help="test dataset directory (default: fresh draw for synthetic data)")
    e.add_argument("--degree", type=int, help="covariate polynomial degree")
    e.add_argument("--policy", choices=("observed", "grid"))
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="replicated experiment grid")
    b.add_argument("--preset", choices=sorted(bench.PRESETS), required=True)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--seed0", type=int, default=0, help="first replication seed")
    b.add_argument("--n", type=int, default=3000)
    b.add_argument("--methods", nargs="+", choices=bench.ALL_METHODS)
    b.add_argument("--jobs", type=int, default=1, help="parallel workers (-1: all cores)")
    b.add_argument("--degree", type=int)
    b.add_argument("--policy", choices=("observed", "grid"))
    b.add_argument("--out", required=True)
    meta_flags(b)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"metaem {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"metaem {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
