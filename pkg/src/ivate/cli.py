"""Command-line interface: ``ivate fit | simulate | diagnose | convert``.

Exit codes: 0 success, 2 bad usage, 3 data validation error, 4 numerical
failure. Options can also come from a flat ``key = value`` config file
(``--config``); command-line flags win.
"""
import argparse
import csv
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .data import ColumnMap, dichotomize, impute_mean_with_indicators, load_csv, save_csv
from .diagnostics import test_iv_inequalities
from .errors import DataError, IVError, NumericalError
from .estimators import REGISTRY, EstimatorConfig, estimate, FitCache
from .inference import BootstrapConfig, bootstrap_ci, default_workers
from .param import DELTA_LINKS
from .simulate import (NAMED_SCENARIOS, ScenarioSpec, format_summary, grid_codes,
                       run_monte_carlo, write_summary)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RESULT_FIELDS = ("estimator", "delta_hat", "se", "ci_lo", "ci_hi", "in_bounds", "converged")
DEFAULT_FIT_ESTIMATORS = ("crude", "2sls", "b-reg", "b-ipw", "g", "mr", "b-mr")

log = logging.getLogger("ivate")


class UsageError(Exception):
    pass


def _csv_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use dashes or underscores."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {num}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _data_args(p):
    p.add_argument("--data", help="input CSV")
    p.add_argument("--outcome")
    p.add_argument("--treatment")
    p.add_argument("--instrument")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--weight", help="sampling-weight column")
    p.add_argument("--impute", help="comma-separated covariates to mean-impute with indicators")
    p.add_argument("--dichotomize", help="'median' or a numeric threshold for a continuous outcome")


def build_parser():
    parser = argparse.ArgumentParser(prog="ivate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate the average Wald estimand from a CSV")
    fit.add_argument("--config")
    _data_args(fit)
    fit.add_argument("--estimator", "--estimators", dest="estimators",
                     help=f"comma-separated subset of {','.join(REGISTRY)} (or 'all')")
    fit.add_argument("--link", choices=DELTA_LINKS, help="link for delta^D (default tanh)")
    fit.add_argument("--bootstrap", type=int, help="number of bootstrap replicates (0 = none)")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--level", type=float, help="confidence level (default 0.95)")
    fit.add_argument("--failure-policy", choices=("drop-and-report", "abort"))
    fit.add_argument("--workers", type=int)
    fit.add_argument("--no-se", action="store_true", default=None, help="skip sandwich SEs")
    fit.add_argument("--approximate-roots", action="store_true", default=None,
                     help="use least-squares solutions (flagged converged=false) when an "
                          "estimating equation has no exact root, instead of failing")
    fit.add_argument("--out", help="results CSV (default: results.csv)")
    fit.add_argument("--report", help="text report (default: stdout only)")

    sim = sub.add_parser("simulate", help="Monte Carlo study under a misspecification scenario")
    sim.add_argument("--config")
    sim.add_argument("--scenario", help=f"{', '.join(NAMED_SCENARIOS)}, a C/W code, or 'grid'")
    sim.add_argument("--reps", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--estimators")
    sim.add_argument("--workers", type=int)
    sim.add_argument("--out", help="summary CSV (default: simulation.csv)")
    sim.add_argument("--replicates-out", help="per-replicate estimates CSV")

    dia = sub.add_parser("diagnose", help="screen the instrumental inequalities")
    dia.add_argument("--config")
    _data_args(dia)
    dia.add_argument("--stratify", help="comma-separated stratification columns")
    dia.add_argument("--bins", type=int, help="quantile bins of the single --stratify column")
    dia.add_argument("--tol", type=float, help="fixed tolerance instead of 2 binomial SEs")
    dia.add_argument("--out", help="per-stratum CSV")

    conv = sub.add_parser("convert", help="validate, impute and dichotomize; write a clean CSV")
    conv.add_argument("--config")
    _data_args(conv)
    conv.add_argument("--out", help="output CSV")
    return parser


def _resolve(args):
    """Merge config-file values under explicit flags; returns a plain dict."""
    opts = read_config(args.config) if getattr(args, "config", None) else {}
    for key, val in vars(args).items():
        if val is not None:
            opts[key] = val
    return opts


def _get(opts, key, cast=str, default=None, required=False):
    if key not in opts or opts[key] in (None, ""):
        if required:
            raise UsageError(f"--{key.replace('_', '-')} is required")
        return default
    val = opts[key]
    try:
        if cast is bool and isinstance(val, str):
            return val.strip().lower() in ("1", "true", "yes", "on")
        return cast(val)
    except (TypeError, ValueError):
        raise UsageError(f"invalid value for {key}: {val!r}") from None


def _load(opts):
    cmap = ColumnMap(_get(opts, "instrument", required=True), _get(opts, "treatment", required=True),
                     _get(opts, "outcome", required=True),
                     tuple(_csv_list(_get(opts, "covariates", default=""))), _get(opts, "weight"))
    ds = load_csv(_get(opts, "data", required=True), cmap)
    imp = _csv_list(_get(opts, "impute", default=""))
    if imp:
        ds = impute_mean_with_indicators(ds, imp)
    thr = _get(opts, "dichotomize")
    if thr:
        ds = dichotomize(ds, thr if thr == "median" else float(thr))
    return ds


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "NA" if not math.isfinite(v) else f"{v:.17g}"
    return str(v)


def _estimators(opts, default):
    names = _csv_list(_get(opts, "estimators", default=",".join(default)))
    if names == ["all"]:
        names = list(REGISTRY)
    bad = [n for n in names if n not in REGISTRY]
    if bad:
        raise UsageError(f"unknown estimator(s) {', '.join(bad)}; choose from {', '.join(REGISTRY)}")
    return names


def cmd_fit(opts):
    names = _estimators(opts, DEFAULT_FIT_ESTIMATORS)
    nboot = _get(opts, "bootstrap", int, 0)
    seed = _get(opts, "seed", int)
    if nboot > 0 and seed is None:
        raise UsageError("--seed is required with --bootstrap")
    level = _get(opts, "level", float, 0.95)
    workers = _get(opts, "workers", int, default_workers())
    link = _get(opts, "link", default="tanh")
    if link not in DELTA_LINKS:
        raise UsageError(f"--link must be one of {DELTA_LINKS}")
    ds = _load(opts)
    approx = _get(opts, "approximate_roots", bool, False)
    cfg = EstimatorConfig(delta_d_link=link, variance=not _get(opts, "no_se", bool, False),
                          approximate_roots=approx)
    bcfg = BootstrapConfig(nboot, seed or 0, level, _get(opts, "failure_policy", default="drop-and-report"),
                           workers) if nboot > 0 else None
    log.info("fit: n=%d covariates=%s estimators=%s link=%s bootstrap=%d seed=%s level=%s "
             "approximate_roots=%s", ds.n, ",".join(ds.column_names[1:]), ",".join(names), link,
             nboot, seed, level, approx)

    cache = FitCache(ds, cfg)
    reports = []
    for name in names:
        reports.extend(estimate(ds, name, cache=cache))
    if bcfg is not None:
        plain = EstimatorConfig(delta_d_link=link, approximate_roots=approx)
        for rep in reports:
            boot = bootstrap_ci(ds, rep.estimator_tag, bcfg, estimator_config=plain)
            rep.ci = boot.ci
            rep.warnings.extend(boot.warnings)

    out = Path(_get(opts, "out", default="results.csv"))
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in reports:
            lo, hi = r.ci if r.ci else (None, None)
            w.writerow([r.estimator_tag, _fmt(r.delta_hat), _fmt(r.se), _fmt(lo), _fmt(hi),
                        _fmt(r.in_bounds), _fmt(r.converged)])
    text = fit_report(reports, ds, level if bcfg else None, seed)
    if opts.get("report"):
        Path(opts["report"]).write_text(text + "\n", encoding="utf-8")
    print(text)
    for r in reports:
        for msg in r.warnings:
            log.warning("%s: %s", r.estimator_tag, msg)
    return EXIT_OK


def fit_report(reports, ds, level, seed):
    """Text table with columns Method, Point Estimate and CI."""
    head = f"{'Method':<10}{'Point Estimate':>16}"
    head += f"{f'{level:.0%} CI':>24}" if level else f"{'SE':>12}"
    lines = [f"n = {ds.n}, covariates: {', '.join(ds.column_names[1:]) or 'none'}", head]
    for r in reports:
        row = f"{r.estimator_tag:<10}{r.delta_hat:>16.3f}"
        if level:
            row += f"{f'({r.ci[0]:.3f}, {r.ci[1]:.3f})':>24}"
        else:
            row += f"{r.se:>12.3f}" if r.se is not None else f"{'-':>12}"
        lines.append(row)
    if level:
        lines.append(f"percentile bootstrap, seed {seed}")
    return "\n".join(lines)


def cmd_simulate(opts):
    seed = _get(opts, "seed", int)
    if seed is None:
        raise UsageError("--seed is required for simulate")
    scenario = _get(opts, "scenario", default="all-correct")
    names = _estimators(opts, ("b-reg", "b-ipw", "g", "mr", "b-mr"))
    reps, n = _get(opts, "reps", int, 1000), _get(opts, "n", int, 500)
    if reps < 1 or n < 10:
        raise UsageError("--reps must be >= 1 and --n >= 10")
    workers = _get(opts, "workers", int, default_workers())
    scenarios = grid_codes() if scenario == "grid" else [scenario]
    out = Path(_get(opts, "out", default="simulation.csv"))
    dump = _get(opts, "replicates_out")
    log.info("simulate: scenario=%s reps=%d n=%d seed=%d estimators=%s", scenario, reps, n, seed,
             ",".join(names))
    all_rows = []
    for k, sc in enumerate(scenarios):
        try:
            spec = ScenarioSpec(sc, n=n, reps=reps, seed=seed, estimators=tuple(names), workers=workers)
            spec.code
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        target = None
        if dump:
            target = dump if len(scenarios) == 1 else f"{Path(dump).with_suffix('')}_{sc}.csv"
        rows, _ = run_monte_carlo(spec, target)
        all_rows.append((sc, rows))
        print(format_summary(rows, f"scenario {sc} (n={n}, reps={reps})"))
    write_summary(all_rows, out)
    return EXIT_OK


def cmd_diagnose(opts):
    ds = _load(opts)
    strat = _csv_list(_get(opts, "stratify", default=""))
    rep = test_iv_inequalities(ds, strat or None, bins=_get(opts, "bins", int),
                               tol=_get(opts, "tol", float))
    log.info("diagnose: n=%d stratify=%s", ds.n, ",".join(strat) or "none")
    if opts.get("out"):
        rep.write_csv(opts["out"])
    print(rep.format())
    print(f"violation = {int(rep.violation)}")
    return EXIT_OK


def cmd_convert(opts):
    ds = _load(opts)
    out = _get(opts, "out", required=True)
    save_csv(ds, out)
    print(f"wrote {ds.n} rows ({ds.metadata.get('dropped_rows', 0)} dropped) to {out}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "diagnose": cmd_diagnose,
            "convert": cmd_convert}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = _resolve(args)
        log.info("resolved config: %s", {k: v for k, v in sorted(opts.items()) if v is not None})
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"ivate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"ivate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        where = ", ".join(f"{k}={v}" for k, v in (("estimator", exc.estimator),
                                                  ("nuisance", exc.nuisance)) if v)
        print(f"ivate: numerical failure{f' ({where})' if where else ''}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IVError as exc:
        print(f"ivate: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
