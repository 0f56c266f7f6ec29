"""Command-line harness: one experiment per invocation, reproducible outputs.

Subcommands match the experiment kinds.  Each run writes

    <out>/records.jsonl   per-checkpoint records, one JSON object per line
    <out>/summary.json    the ExperimentRecord (wall-clock under "timing")

and optional CSV plot data via --emit.  Exit status 0 iff every enabled
invariant check passed; 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cache as _cache
from .config import (EXPERIMENT_KINDS, ConfigError, ExperimentConfig,
                     config_hash, parse_config)
from .grid import GradedGrid, GridDensity
from .martingale import Decomposition, pathwise_identity_residual, \
    tail_series_diagnostics
from .stochastics import (asip_surrogate, clt_test, nearby_maps_experiment,
                          quenched_experiment, run_ensemble)
from .transfer import (OperatorFactory, build_ulam, check_cone, decay_curve,
                       fit_loglog_slope, lower_bound_scan)

log = logging.getLogger("pmlab")

SCHEMA_VERSION = 1


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _spot_check_cache(factory: OperatorFactory, rng: np.random.Generator,
                      force: bool = False) -> bool:
    """With probability 0.05 (or forced), rebuild one cached operator and
    verify the cached matrix bit-equals the fresh build."""
    if factory.cache_dir is None or not factory._lru:
        return True
    if not force and rng.random() >= 0.05:
        return True
    beta = next(iter(factory._lru))
    cached = factory._lru[beta].matrix
    fresh = build_ulam(beta, factory.grid).matrix
    ok = np.array_equal(cached, fresh)
    if not ok:
        log.warning("cache spot-check failed for beta=%s; rebuilding", beta)
        path = _cache.matrix_path(factory.cache_dir, beta,
                                  factory.grid.n_cells, factory.grid.rho)
        path.unlink(missing_ok=True)
        factory._lru.pop(beta, None)
    return ok


# ---------------------------------------------------------------------------
# Experiment runners.  Each returns (rows, summary_outputs, checks, curves):
# rows are the JSON-lines records, curves maps curve name -> (header, columns).


def _default_checkpoints(n_max: int):
    cps = []
    k = 8
    while k <= n_max:
        cps.append(k)
        k *= 2
    if not cps or cps[-1] != n_max:
        cps.append(n_max)
    return cps


def _run_density_scan(config: ExperimentConfig, grid, schedule, phi, factory):
    n_max = config.ensemble_spec["n_max"]
    ns, minima = lower_bound_scan(schedule, n_max, grid, factory=factory)
    rows = [{"n": int(n), "min_Pn1": float(m)} for n, m in zip(ns, minima)]
    tail = minima[-min(100, len(minima)):]
    spread = float((tail.max() - tail.min()) / tail.min()) if tail.min() > 0 else float("inf")
    outputs = {
        "floor": float(minima.min()),
        "final_min": float(minima[-1]),
        "tail_relative_spread": spread,
    }
    checks = {"lower_bound_positive": bool(minima.min() > 0.0)}
    curves = {"lower-bound": (["n", "min_Pn1"], [ns, minima])}
    return rows, outputs, checks, curves


def _run_cone(config: ExperimentConfig, grid, schedule, phi, factory):
    params = config.params
    a = params.get("a", 60.0)
    n_steps = params.get("n_steps", 100)
    alpha = schedule.alpha_cap
    density = GridDensity.ones(grid)
    rows = []
    all_pass = True
    worst_a = 0.0
    for n, beta in enumerate(schedule.betas(n_steps), start=1):
        density = factory(beta).transform(density)
        report = check_cone(density, a, alpha)
        all_pass &= report.passed
        worst_a = max(worst_a, report.smallest_admissible_a)
        rows.append({"n": n, "passed": report.passed,
                     "smallest_admissible_a": report.smallest_admissible_a})
    outputs = {"a": a, "largest_required_a": worst_a}
    checks = {"cone_preserved": bool(all_pass)}
    return rows, outputs, checks, {}


def _run_decay(config: ExperimentConfig, grid, schedule, phi, factory):
    params = config.params
    p = params.get("p", 1.0)
    n_max = config.ensemble_spec["n_max"]
    window = params.get("fit_window", [max(2, n_max // 40), n_max])
    h = GridDensity.ones(grid)
    ns, norms = decay_curve(schedule, phi, h, p, n_max, factory=factory)
    slope = fit_loglog_slope(ns, norms, tuple(window))
    rows = [{"n": int(n), "Lp_norm": float(v)} for n, v in zip(ns, norms)]
    outputs = {"p": p, "fitted_slope": slope, "fit_window": list(window)}
    checks = {"norms_decreasing_overall": bool(norms[-1] < norms[0])}
    lo, hi = config.tolerances.get("slope_range", [None, None])
    if lo is not None:
        checks["slope_in_range"] = bool(lo <= slope <= hi)
    curves = {"decay": (["n", "Lp_norm"], [ns, norms])}
    return rows, outputs, checks, curves


def _run_martingale(config: ExperimentConfig, grid, schedule, phi, factory):
    tol = config.tolerances
    n_max = config.ensemble_spec["n_max"]
    r = config.params.get("r")
    decomp = Decomposition(schedule, phi, grid, factory=factory,
                           r_moments=(r,) if r else ())
    scan = decomp.scan(n_max)
    m_traj = min(config.ensemble_spec["m"], 100)
    x0 = (np.arange(m_traj) + 0.5) / m_traj
    pathwise = pathwise_identity_residual(
        schedule, phi, grid, x0, min(n_max, 200), factory=OperatorFactory(grid))
    rows = [
        {"n": int(n), "c": float(scan.c[n - 1]), "v": float(scan.v[n - 1]),
         "sigma2": float(scan.sigma2[n - 1]), "Sigma2": float(scan.Sigma2[n - 1]),
         "martingale_residual": float(scan.martingale_residuals[n - 1])}
        for n in _default_checkpoints(n_max)
    ]
    outputs = {
        "max_martingale_residual": float(scan.martingale_residuals.max()),
        "pathwise_residual": float(pathwise),
        "sigma2_final": float(scan.sigma2[-1]),
        "Sigma2_final": float(scan.Sigma2[-1]),
    }
    if r:
        norms = scan.h_moments[float(r)] ** (1.0 / float(r))
        outputs["h_moment_sup"] = float(np.maximum.accumulate(norms)[-1])
    checks = {
        "martingale_residual_small": bool(
            scan.martingale_residuals.max() < tol.get("martingale_residual", 1e-8)),
        "pathwise_residual_small": bool(
            pathwise < tol.get("pathwise_residual", 1e-7)),
    }
    tails = tail_series_diagnostics(scan.v)
    curves = {
        "variance": (["n", "Sigma2", "sigma2"],
                     [np.arange(1, n_max + 1), scan.Sigma2, scan.sigma2]),
        "ratio-diagnostics": (
            ["n", "sigma_ratio", "delta_sigma_product"],
            [tails.ns[:-1], tails.ratio, tails.delta_sigma_product[:-1]]),
    }
    return rows, outputs, checks, curves


def _ensemble_common(config, grid, schedule, phi, factory):
    ens = config.ensemble_spec
    n_max = ens["n_max"]
    cps = ens["checkpoints"] or _default_checkpoints(n_max)
    scan = Decomposition(schedule, phi, grid, factory=factory).scan(n_max)
    result = run_ensemble(schedule, phi, scan.c, ens["m"], n_max, cps,
                          seed=config.seed, workers=config.workers)
    return scan, result, cps


def _run_variance(config: ExperimentConfig, grid, schedule, phi, factory):
    scan, result, cps = _ensemble_common(config, grid, schedule, phi, factory)
    idx = np.asarray(cps) - 1
    identity_gap = np.abs(
        result.sigma2_hat - scan.sigma2[idx]
        - (scan.Sigma2[idx] - scan.sigma2[idx])
    )
    within = identity_gap <= 3.0 * result.stderr
    rows = [
        {"n": int(n), "Sigma2_hat": float(s), "stderr": float(e),
         "sigma2": float(scan.sigma2[n - 1]), "Sigma2_grid": float(scan.Sigma2[n - 1])}
        for n, s, e in zip(cps, result.sigma2_hat, result.stderr)
    ]
    outputs = {
        "gamma_hat": result.fit.gamma_hat,
        "gamma_ci": list(result.fit.gamma_ci),
        "max_identity_gap_stderr_units": float(
            np.max(identity_gap / np.maximum(result.stderr, 1e-300))),
    }
    checks = {"variance_identity_within_3se": bool(np.all(within))}
    curves = {"variance": (["n", "Sigma2", "stderr"],
                           [np.asarray(cps), result.sigma2_hat, result.stderr])}
    return rows, outputs, checks, curves


def _run_clt(config: ExperimentConfig, grid, schedule, phi, factory):
    scan, result, cps = _ensemble_common(config, grid, schedule, phi, factory)
    ks = clt_test(result.normalized(len(cps) - 1),
                  min_size=min(1000, config.ensemble_spec["m"]))
    rows = [{"n": int(n), "Sigma2_hat": float(s)}
            for n, s in zip(cps, result.sigma2_hat)]
    outputs = {"ks_statistic": ks.statistic, "ks_p_value": ks.p_value,
               "degenerate": ks.degenerate}
    threshold = config.tolerances.get("ks", 0.05)
    checks = {"clt_ks_small": bool(ks.degenerate or ks.statistic < threshold)}
    return rows, outputs, checks, {}


def _run_asip(config: ExperimentConfig, grid, schedule, phi, factory):
    scan, result, cps = _ensemble_common(config, grid, schedule, phi, factory)
    report = asip_surrogate(scan.v, config.seed + 1, cps, result.snapshots)
    rows = [{"n": int(n), "ks": k.statistic, "p": k.p_value}
            for n, k in zip(cps, report.ks_by_checkpoint)]
    final_ks = report.ks_by_checkpoint[-1]
    outputs = {"ledger_exact": report.ledger_exact,
               "final_ks": final_ks.statistic, "final_p": final_ks.p_value}
    threshold = config.tolerances.get("ks", 0.05)
    checks = {"variance_ledger_exact": bool(report.ledger_exact),
              "surrogate_ks_small": bool(final_ks.statistic < threshold)}
    return rows, outputs, checks, {}


def _run_nearby(config: ExperimentConfig, grid, schedule, phi, factory):
    params = config.params
    ens = config.ensemble_spec
    spec = config.schedule_spec
    cps = ens["checkpoints"] or _default_checkpoints(ens["n_max"])
    fits = nearby_maps_experiment(
        spec["beta0"], spec.get("epsilon", 0.0), phi, grid, ens["m"],
        ens["n_max"], cps, seed=config.seed,
        n_schedules=params.get("n_schedules", 4), workers=config.workers)
    rows = [{"schedule": j, "gamma_hat": f.gamma_hat, "degenerate": f.degenerate}
            for j, f in enumerate(fits)]
    gammas = [f.gamma_hat for f in fits if not f.degenerate]
    lo, hi = config.tolerances.get("gamma_range", [0.8, 1.2])
    outputs = {"gamma_hats": gammas}
    checks = {"linear_growth": bool(gammas and all(lo <= g <= hi for g in gammas))}
    return rows, outputs, checks, {}


def _run_quenched(config: ExperimentConfig, grid, schedule, phi, factory):
    params = config.params
    ens = config.ensemble_spec
    spec = config.schedule_spec
    cps = ens["checkpoints"] or _default_checkpoints(ens["n_max"])
    fits = quenched_experiment(
        spec["alphabet"], spec["probabilities"], phi, grid, ens["m"],
        ens["n_max"], cps, master_seed=config.seed,
        n_omega=params.get("n_omega", 8), workers=config.workers)
    rows = [{"omega": j, "gamma_hat": f.gamma_hat, "degenerate": f.degenerate}
            for j, f in enumerate(fits)]
    gammas = [f.gamma_hat for f in fits if not f.degenerate]
    lo, hi = config.tolerances.get("gamma_range", [0.8, 1.2])
    outputs = {"gamma_hats": gammas}
    checks = {"quenched_linear_growth":
              bool(gammas and all(lo <= g <= hi for g in gammas))}
    return rows, outputs, checks, {}


_RUNNERS = {
    "density-scan": _run_density_scan,
    "cone": _run_cone,
    "decay": _run_decay,
    "martingale": _run_martingale,
    "variance": _run_variance,
    "clt": _run_clt,
    "asip": _run_asip,
    "nearby": _run_nearby,
    "quenched": _run_quenched,
}


def run_experiment(config: ExperimentConfig, out_dir=None, cache_dir=None,
                   force_cache_check: bool = False) -> dict:
    """Dispatch one experiment and return the ExperimentRecord dict.

    When ``out_dir`` is given, writes records.jsonl and summary.json there.
    The summary is deterministic given (config, seed) except for the "timing"
    key.
    """
    grid_spec = config.grid_spec
    grid = GradedGrid(grid_spec["n_cells"], grid_spec["rho"])
    if cache_dir is None:
        cache_dir = _cache.default_cache_dir()
    factory = OperatorFactory(grid, cache_dir=cache_dir)
    schedule = config.build_schedule()
    phi = config.build_observable()

    t0 = time.time()
    rows, outputs, checks, curves = _RUNNERS[config.kind](
        config, grid, schedule, phi, factory)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(config.seed)))
    checks["cache_spot_check"] = _spot_check_cache(
        factory, rng, force=force_cache_check)
    wall = time.time() - t0

    record = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "kind": config.kind,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "outputs": outputs,
        "checks": checks,
        "passed": all(checks.values()),
        "timing": {"wall_clock_s": wall},
        "_curves": curves,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "records.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, default=_json_default,
                                    sort_keys=True) + "\n")
        summary = {k: v for k, v in record.items() if k != "_curves"}
        with open(out / "summary.json", "w") as fh:
            json.dump(summary, fh, default=_json_default, sort_keys=True, indent=2)
            fh.write("\n")
    return record


def emit_plotdata(record: dict, which_curve: str) -> str:
    """CSV text for one curve of a record, 17 significant digits per value."""
    curves = record.get("_curves", {})
    if which_curve not in curves:
        known = ", ".join(sorted(curves)) or "none"
        raise KeyError(f"unknown curve {which_curve!r}; available: {known}")
    header, columns = curves[which_curve]
    lines = [",".join(header)]
    for vals in zip(*columns):
        lines.append(",".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pmlab",
        description="Sequential Pomeau-Manneville statistics experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=None,
                       help="override the config worker count")
        p.add_argument("--out", type=Path, default=Path("pmlab-out"))
        p.add_argument("--emit", default=None, metavar="CURVE",
                       help="also write <out>/<CURVE>.csv plot data")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = parse_config(args.config.read_text())
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 2
    if config.kind != args.kind:
        print(f"config error: config is for {config.kind!r}, "
              f"subcommand is {args.kind!r}", file=sys.stderr)
        return 2
    if args.seed is not None or args.workers is not None:
        raw = json.loads(json.dumps(config.raw))
        if args.seed is not None:
            raw["experiment"]["seed"] = args.seed
        if args.workers is not None:
            raw["experiment"]["workers"] = args.workers
        config = ExperimentConfig(
            kind=config.kind, raw=raw, seed=int(raw["experiment"]["seed"]),
            workers=int(raw["experiment"]["workers"]))

    try:
        record = run_experiment(config, out_dir=args.out)
    except Exception as exc:  # numeric aborts surfaced verbatim
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if args.emit:
        try:
            csv_text = emit_plotdata(record, args.emit)
        except KeyError as exc:
            print(f"error: {exc.args[0]}", file=sys.stderr)
            return 2
        (args.out / f"{args.emit}.csv").write_text(csv_text)
    for name, ok in sorted(record["checks"].items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if record["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
