"""Command line: ``mnstm fit | simulate | diagnose | validate-props``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .io import (InputError, load_truth, read_pi_trace, save_adjacency, save_count_panel,
                 save_covariates, save_truth, write_json)
from .runner import EXIT_NUMERIC, EXIT_OK, EXIT_USER, RunConfig, compute_diagnostics, run

log = logging.getLogger("mnstm")

_FIT_FLAGS = {
    "counts": str, "adjacency": str, "covariates": str, "truth": str, "out": str,
    "model": str, "basis": str, "rank": int, "n_units": int, "n_times": int,
    "category_order": str, "iterations": int, "burn_in": int, "thinning": int, "seed": int,
    "n_chains": int, "xi_prediction": str, "ess_estimator": str,
    "sigma": float, "rho": float, "eps": float, "eps_scheme": str,
}


def _add_fit(sub):
    p = sub.add_parser("fit", help="fit a model to a count panel")
    p.add_argument("--config", help="YAML or JSON run configuration; flags override it")
    p.add_argument("--counts", help="CSV with k,i,t,y[,m] rows")
    p.add_argument("--adjacency", help="edge list of unit neighbours")
    p.add_argument("--covariates", help="CSV with k,i,t,x0..x{p-1} rows")
    p.add_argument("--truth", help="optional CSV with k,i,t,pi[,m] for accuracy metrics")
    p.add_argument("--out", help="output directory")
    p.add_argument("--model", choices=["mnstm", "lmlb"])
    p.add_argument("--basis", choices=["moran", "complement"])
    p.add_argument("--rank", type=int)
    p.add_argument("--n-units", type=int, dest="n_units")
    p.add_argument("--n-times", type=int, dest="n_times")
    p.add_argument("--category-order", choices=["input", "descending"], dest="category_order")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int, dest="burn_in")
    p.add_argument("--thin", type=int, dest="thinning")
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int, dest="n_chains")
    p.add_argument("--sigma", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--eps-scheme", choices=["split", "empirical_bayes"], dest="eps_scheme")
    p.add_argument("--xi-prediction", choices=["prior", "zero"], dest="xi_prediction")
    p.add_argument("--ess-estimator", choices=["autocorrelation", "batch"],
                   dest="ess_estimator")
    p.add_argument("--no-merge-rows", action="store_false", dest="merge_rows", default=None,
                   help="keep duplicate likelihood rows separate")
    p.add_argument("--workers", type=int, help="parallel chains (default MNSTM_NUM_THREADS or 1)")


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="write a synthetic panel and a matching fit config")
    p.add_argument("--design", choices=["empirical_mnstm", "appendix_b_static"],
                   default="empirical_mnstm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-units", type=int, dest="N")
    p.add_argument("--n-categories", type=int, dest="K")
    p.add_argument("--n-times", type=int, dest="T")
    p.add_argument("--rank", type=int, dest="r")
    p.add_argument("--observed-fraction", type=float, dest="observed_fraction")


def _add_diagnose(sub):
    p = sub.add_parser("diagnose", help="recompute diagnostics from a finished run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--truth")
    p.add_argument("--ess-estimator", choices=["autocorrelation", "batch"],
                   default="autocorrelation")


def _add_validate(sub):
    p = sub.add_parser("validate-props", help="run the numerical property batteries")
    p.add_argument("--quick", action="store_true", help="smaller Monte Carlo sizes")
    p.add_argument("--out", help="write results as JSON here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnstm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mnstm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_fit(sub)
    _add_simulate(sub)
    _add_diagnose(sub)
    _add_validate(sub)
    return parser


def cmd_fit(args) -> int:
    overrides = {k: getattr(args, k) for k in _FIT_FLAGS if getattr(args, k, None) is not None}
    if args.merge_rows is not None:
        overrides["merge_rows"] = args.merge_rows
    try:
        if args.config:
            cfg = RunConfig.from_file(args.config, overrides)
        else:
            cfg = RunConfig().updated(overrides)
    except (InputError, TypeError, ValueError) as exc:
        log.error("[config] %s", exc)
        return EXIT_USER
    return run(cfg, workers=args.workers)


def recommended_config(design) -> dict:
    if design.variant == "appendix_b_static":
        return {"model": "lmlb", "basis": "complement", "rank": design.r,
                "eps_scheme": "empirical_bayes", "iterations": 2000}
    return {"model": "mnstm", "basis": "moran", "rank": design.r,
            "eps_scheme": "empirical_bayes", "iterations": 2000}


def cmd_simulate(args) -> int:
    from .simulate import SimDesign, simulate_panel
    dims = {k: getattr(args, k) for k in ("N", "K", "T", "r", "observed_fraction")
            if getattr(args, k) is not None}
    try:
        design = SimDesign(variant=args.design, **dims)
    except ValueError as exc:
        log.error("[config] %s", exc)
        return EXIT_USER
    sim = simulate_panel(design, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_count_panel(sim.panel, out / "counts.csv")
    save_covariates(sim.covariates, design.N, out / "covariates.csv")
    save_truth(sim.truth, sim.extras["totals"], out / "truth.csv")
    cfg = {"counts": "counts.csv", "covariates": "covariates.csv", "truth": "truth.csv",
           "out": "fit", "n_units": design.N, "n_times": design.T, "seed": args.seed}
    if sim.adjacency is not None:
        save_adjacency(sim.adjacency, out / "adjacency.txt")
        cfg["adjacency"] = "adjacency.txt"
    cfg.update(recommended_config(design))
    with (out / "config.yaml").open("w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    print(f"wrote {out} (fit with: mnstm fit --config {out / 'config.yaml'})")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        pi, chains = read_pi_trace(run_dir)
        truth = totals = None
        if args.truth:
            K, N, T = pi.shape[1:]
            truth, totals = load_truth(args.truth, K, N, T)
    except (OSError, ValueError, KeyError) as exc:
        log.error("[load] %s", exc)
        return EXIT_USER
    diag = compute_diagnostics(pi, chains, truth, totals, args.ess_estimator)
    write_json(diag, run_dir / "diagnostics.json")
    print(json.dumps({k: diag[k] for k in diag if k in ("ess", "mrae", "coverage_95")},
                     indent=2, default=float))
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validation import run_all
    results = run_all(quick=args.quick)
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['name']}: metric={r['metric']:.3g} tolerance={r['tolerance']:.3g} "
              f"({r['seconds']:.1f}s)")
    if args.out:
        write_json(results, args.out)
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    handlers = {"fit": cmd_fit, "simulate": cmd_simulate, "diagnose": cmd_diagnose,
                "validate-props": cmd_validate}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
