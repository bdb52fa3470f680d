"""Command-line interface: ``spatialtensor {simulate,fit,estimate,benchmark,diagnose}``.

Exit codes: 0 success, 1 data or configuration error, 2 convergence failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .estimator import StepError, marginal_effect, run_pipeline
from .io import (
    DataError, RunConfig, emit_dataset, ingest, load_truth, workers_from_env, write_csv,
    write_json,
)
from .simgen import (
    ScenarioConfig, default_methods, generate, replication_records, summarize_records,
)
from .spatial_basis import graph_basis, knn_graph
from .spgd import ConvergenceError
from .tensor_core import ContractError

log = logging.getLogger("spatialtensor")

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2


class NotConverged(RuntimeError):
    pass


def _csv_list(cast):
    def parse(text):
        return [cast(v) for v in text.split(",") if v.strip()]
    return parse


def _bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# flag name -> (RunConfig field, type)
_FLAGS = {
    "data": ("data_dir", str),
    "out": ("out_dir", str),
    "ranks": ("ranks", _csv_list(int)),
    "cv_folds": ("cv_folds", int),
    "cv_rule": ("cv_rule", str),
    "spatial": ("spatial", _bool),
    "max_eigs": ("max_eigs", int),
    "patience": ("patience", int),
    "fixed_eigs": ("fixed_eigs", _csv_list(int)),
    "floor": ("propensity_floor", float),
    "ridge": ("ridge", float),
    "cross_fit_folds": ("cross_fit_folds", int),
    "alpha": ("alpha", float),
    "reference_level": ("reference_level", int),
    "transform": ("transform", str),
    "shift": ("shift", float),
    "standardize_outcomes": ("standardize_outcomes", _bool),
    "k_grid": ("k_grid", _csv_list(int)),
    "replications": ("replications", int),
    "methods": ("methods", _csv_list(str)),
    "step": ("step", str),
    "tol": ("tol", float),
    "max_iter": ("max_iter", int),
    "seed": ("seed", int),
}

_SCENARIO_FLAGS = {
    "rows": int, "cols": int, "K": int, "O": int, "gamma": float, "sigma": float,
    "overlap": float, "j_max": int, "decay": float, "effect_scale": float,
    "true_ranks": _csv_list(int),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatialtensor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "estimate", "benchmark", "diagnose"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration (e.g. an emitted config.json)")
        for flag, (_, typ) in _FLAGS.items():
            sp.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)
        if name in ("simulate", "benchmark"):
            for flag, typ in _SCENARIO_FLAGS.items():
                sp.add_argument("--" + flag.replace("_", "-"), dest="sc_" + flag, type=typ,
                                default=None)
        sp.add_argument("--cv", action="store_true",
                        help="select Tucker ranks by cross-validation instead of --ranks")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    d = cfg.to_dict()
    d["command"] = args.command
    for flag, (key, _) in _FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "cv", False):
        d["ranks"] = None
    sc = dict(d.get("scenario") or {})
    for flag in _SCENARIO_FLAGS:
        v = getattr(args, "sc_" + flag, None)
        if v is not None:
            sc["ranks" if flag == "true_ranks" else flag] = v
    if args.command in ("simulate", "benchmark"):
        sc.setdefault("seed", d["seed"])
        d["scenario"] = ScenarioConfig.from_dict(sc).to_dict()
    return RunConfig.from_dict(d)


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out_dir:
        raise DataError("--out is required")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(cfg: RunConfig):
    if not cfg.data_dir:
        raise DataError("--data is required")
    data = ingest(cfg.data_dir, cfg.transform, cfg.shift, cfg.standardize_outcomes,
                  cfg.standardize_covariates, cfg.reference_level)
    if data.dropped_units:
        log.warning("dropped %d units missing from some input file: %s",
                    len(data.dropped_units), data.dropped_units[:20])
    return data


def _basis(data, cfg: RunConfig):
    if not cfg.spatial and not cfg.fixed_eigs:
        return None
    scen = Path(cfg.data_dir) / "scenario.json"
    if scen.exists():
        # synthetic grids use rook adjacency rather than kNN on centroids
        from .simgen import grid_basis
        sc = json.loads(scen.read_text())
        g, basis = grid_basis(sc["rows"], sc["cols"])
        if g.n_nodes == data.Y_obs.shape[0]:
            return basis
    return graph_basis(knn_graph(data.centroids, 4))


def _check_converged(result):
    bad = [n for n, m in (("step1", result.step1), ("step3", result.step3)) if not m.converged]
    if bad:
        raise NotConverged(f"solver did not converge in {', '.join(bad)}")


def _model_json(result, data) -> dict:
    m = result.step3
    return {
        "ranks": list(m.ranks),
        "selected_eigs": [int(j) + 1 for j in m.selected_eigs],
        "core": m.core,
        "eta_Z": m.eta_Z,
        "beta": m.beta,
        "U2": m.U2,
        "U3": m.U3,
        "covariates": ["intercept"] + list(data.covariate_names),
        "outcomes": list(data.outcome_names),
        "propensity": {
            "baseline_level": result.propensity.baseline_level,
            "ridge": result.propensity.ridge,
            "coefficients": result.propensity.coefficients,
            "converged": result.propensity.converged,
        },
    }


def cmd_simulate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ds = generate(ScenarioConfig.from_dict(cfg.scenario))
    emit_dataset(ds, out)
    cfg.dump(out / "config.json")
    return EXIT_OK


def _pipeline(cfg: RunConfig):
    data = _load(cfg)
    basis = _basis(data, cfg)
    result = run_pipeline(data.Y_obs, data.design, data.Z, basis, cfg.pipeline_config(),
                          data.outcome_names, data.transform)
    return data, result


def cmd_fit(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    data, result = _pipeline(cfg)
    write_json(_model_json(result, data), out / "model.json")
    report = {k: v for k, v in result.diagnostics.items() if k != "overlap"}
    write_json(report, out / "fit_report.json")
    cfg.dump(out / "config.json")
    _check_converged(result)
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    data, result = _pipeline(cfg)
    eff = result.effects
    write_csv(eff, out / "effects.csv")
    write_json(eff, out / "effects.json")
    margs = [marginal_effect(result.pseudo_outcomes, data.design.with_reference(cfg.reference_level),
                             k, cfg.alpha, cfg.marginal_weighting, data.outcome_names,
                             data.transform)
             for k in range(1, data.design.K + 1)]
    write_csv(pd.concat(margs, ignore_index=True), out / "marginal_effects.csv")
    from .propensity import overlap_diagnostics
    ov = overlap_diagnostics(result.probs, data.design, cfg.overlap_thresholds,
                             cfg.propensity_floor)
    write_csv(ov, out / "overlap.csv")
    report = {k: v for k, v in result.diagnostics.items() if k != "overlap"}
    if data.transform is not None:
        report["transform"] = data.transform.to_dict()
    report["dropped_units"] = data.dropped_units
    write_json(report, out / "fit_report.json")
    cfg.dump(out / "config.json")
    _check_converged(result)
    return EXIT_OK


def diagnose_sweep(data, basis, cfg: RunConfig) -> pd.DataFrame:
    """Re-estimate effects with the first k non-constant eigenvectors fixed."""
    frames = []
    for k in cfg.k_grid:
        pc = cfg.pipeline_config()
        if k == 0:
            pc.spatial, pc.fixed_eigs = False, None
        else:
            if basis is None or k >= basis.n:
                raise DataError(f"k={k} needs a spectral basis with more than k eigenvectors")
            pc.spatial, pc.fixed_eigs = True, tuple(range(1, k + 1))
        res = run_pipeline(data.Y_obs, data.design, data.Z, basis, pc, data.outcome_names,
                           data.transform)
        eff = res.effects.copy()
        eff.insert(0, "k", k)
        frames.append(eff)
    return pd.concat(frames, ignore_index=True)


def cmd_diagnose(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    data = _load(cfg)
    sweep_cfg = RunConfig.from_dict({**cfg.to_dict(), "spatial": True})
    basis = _basis(data, sweep_cfg)
    sweep = diagnose_sweep(data, basis, cfg)
    write_csv(sweep, out / "k_sweep.csv")
    summary = (sweep.assign(abs_theta=sweep["theta_aipw"].abs())
               .groupby("k", sort=True)["abs_theta"].mean().reset_index()
               .rename(columns={"abs_theta": "mean_abs_theta"}))
    write_csv(summary, out / "k_sweep_summary.csv")
    truth = load_truth(cfg.data_dir)
    if truth is not None:
        lv = sweep["level"].to_numpy() - 1
        oc = sweep["outcome_index"].to_numpy()
        sweep["error"] = sweep["theta_aipw"].to_numpy() - truth[lv, oc]
        write_csv(sweep.groupby("k")["error"].apply(lambda e: np.mean(np.abs(e)))
                  .reset_index().rename(columns={"error": "mean_abs_error"}),
                  out / "k_sweep_error.csv")
    cfg.dump(out / "config.json")
    return EXIT_OK


def _bench_one(args):
    scenario_dict, methods, seed, r = args
    all_methods = default_methods()
    return replication_records({m: all_methods[m] for m in methods},
                               ScenarioConfig.from_dict(scenario_dict), seed, r)


def cmd_benchmark(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    all_methods = default_methods()
    unknown = [m for m in cfg.methods if m not in all_methods]
    if unknown or cfg.replications < 1:
        raise DataError(f"need replications >= 1 and methods from {sorted(all_methods)}")
    scenario = ScenarioConfig.from_dict(cfg.scenario)
    t0 = time.perf_counter()
    workers = workers_from_env()
    jobs = [(cfg.scenario, cfg.methods, scenario.seed + r, r) for r in range(cfg.replications)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_bench_one, jobs))
    else:
        parts = [_bench_one(j) for j in jobs]
    metrics = summarize_records(pd.concat(parts, ignore_index=True))
    timing = metrics[["method", "seconds"]].groupby("method").mean().reset_index()
    # wall-clock timings go to timing.json so that metrics.csv stays reproducible
    metrics = metrics.drop(columns=["seconds"])
    write_csv(metrics, out / "metrics.csv")
    summary = metrics.groupby("method", sort=True)[["bias", "mse", "coverage", "mean_width"]] \
        .mean().reset_index()
    write_csv(summary, out / "metrics_summary.csv")
    write_json({"wall_seconds": time.perf_counter() - t0, "workers": workers,
                "mean_seconds_per_fit": timing}, out / "timing.json")
    cfg.dump(out / "config.json")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "estimate": cmd_estimate,
    "benchmark": cmd_benchmark,
    "diagnose": cmd_diagnose,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved for convergence
        return EXIT_OK if exc.code == 0 else EXIT_DATA
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except StepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE if isinstance(exc.__cause__, (ConvergenceError, FloatingPointError)) \
            else EXIT_DATA
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ContractError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
