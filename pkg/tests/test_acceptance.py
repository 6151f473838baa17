"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The Monte Carlo criteria are slow (the whole file takes about twenty minutes
on one core); replicate runs are shared between criteria.
"""
import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache

import numpy as np
import pytest

from acceptance_log import record
from oracles import bisect_p0, enumerated_population, fd_grad, wald_truth
from ivate.cli import main
from ivate.data import from_arrays
from ivate.diagnostics import feasibility_band, test_iv_inequalities as iv_screen
from ivate.errors import NumericalError
from ivate.estimators import PAPER_ESTIMATORS, estimate_2sls, estimate_all, estimate_mr
from ivate.inference import BootstrapConfig, bootstrap_ci, default_workers
from ivate.nuisance import (fit_propensity_ensemble, outcome_parts, propensity_loglik_parts,
                            treatment_parts)
from ivate.param import WaldParams, map_forward, map_inverse, p0_from_rd_op
from ivate.simulate import TRUE_DELTA, ScenarioSpec, config_for, generate, run_monte_carlo

pytestmark = pytest.mark.slow

MC_SEED = 20240
SCENARIOS = ("all-correct", "m1", "m2", "m3", "all-wrong")
# bias reported in the published table, per scenario and estimator
PUBLISHED_BIAS = {
    "all-correct": {"b-reg": 0.004, "b-ipw": 0.006, "g": 0.002, "mr": 0.006, "b-mr": 0.010},
    "m1": {"b-reg": 0.004, "b-ipw": 0.317, "g": 0.319, "mr": 0.008, "b-mr": -0.011},
    "m2": {"b-reg": 0.054, "b-ipw": 0.006, "g": 0.097, "mr": 0.001, "b-mr": 0.006},
    "m3": {"b-reg": 0.258, "b-ipw": -0.088, "g": 0.002, "mr": 8.336, "b-mr": 0.007},
    "all-wrong": {"b-reg": 0.294, "b-ipw": 0.088, "g": 0.290, "mr": -98.261, "b-mr": 0.162},
}
CLEARLY_BIASED = [("m1", "b-ipw"), ("m1", "g"), ("m3", "b-reg"), ("all-wrong", "b-mr")]
DIVERGENT_RMSE = [("m3", "mr", 10.0), ("all-wrong", "mr", 100.0)]


@lru_cache(maxsize=None)
def monte_carlo(scenario):
    spec = ScenarioSpec(scenario, n=500, reps=1000, seed=MC_SEED, workers=default_workers())
    t0 = time.perf_counter()
    rows, results = run_monte_carlo(spec)
    return {r.estimator: r for r in rows}, results, time.perf_counter() - t0


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_diffeomorphism():
    t0 = time.perf_counter()
    grid = np.linspace(-0.95, 0.95, 9)
    ops = np.exp(np.linspace(-3, 3, 7))
    d, dd, od, oy = (a.ravel() for a in np.meshgrid(grid, grid[grid != 0], ops, ops))
    back = map_inverse(map_forward(WaldParams(d, dd, od, oy)))
    round_trip = max(np.max(np.abs(back.delta - d)), np.max(np.abs(back.delta_d - dd)),
                     np.max(np.abs(np.log(back.op_d / od))), np.max(np.abs(np.log(back.op_y / oy))))

    rng = np.random.default_rng(1)
    rd = rng.uniform(-0.99, 0.99, 10_000)
    op = np.exp(rng.uniform(-5, 5, 10_000))
    vs_bisection = np.max(np.abs(p0_from_rd_op(rd, op) - bisect_p0(rd, op)))

    rdl = np.linspace(-0.9, 0.9, 19)
    at_one = p0_from_rd_op(rdl, np.ones_like(rdl))
    continuity = max(np.max(np.abs(p0_from_rd_op(rdl, 1 + s * eps) - at_one))
                     for eps in (1e-7, 1e-9, 1e-12, 1e-15) for s in (-1, 1))
    elapsed = time.perf_counter() - t0
    ok = round_trip < 1e-10 and vs_bisection < 1e-12 and continuity < 1e-6 and elapsed < 5.0
    assert record(1, ok, f"round trip {round_trip:.2e}, vs bisection {vs_bisection:.2e}, "
                         f"OP=1 continuity {continuity:.2e}, {elapsed:.2f}s")


# -- 2 ---------------------------------------------------------------------

def _random_strata(rng):
    strata = []
    masses = rng.dirichlet([2.0, 2.0])
    for xv, px in zip((0.0, 1.0), masses):
        p0d, p1d = sorted(rng.uniform(0.05, 0.95, 2))
        if rng.random() < 0.5:
            p0d, p1d = p1d, p0d
        # keep the Wald ratio inside (-1, 1) so a tanh model can represent it
        rd_d = p1d - p0d
        delta = rng.uniform(-0.9, 0.9)
        rd_y = delta * rd_d
        p0y = rng.uniform(max(0.02, -rd_y + 0.02), min(0.98, 0.98 - rd_y))
        strata.append((xv, px, rng.uniform(0.2, 0.8), p0d, p1d, p0y, p0y + rd_y))
    return strata


def test_criterion_2_exact_enumeration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    populations = [[(0.0, 0.4, 0.3, 0.2, 0.7, 0.3, 0.55), (1.0, 0.6, 0.6, 0.5, 0.2, 0.4, 0.34)]]
    populations += [_random_strata(rng) for _ in range(4)]
    for strata in populations:
        ds = enumerated_population(strata)
        reports, _ = estimate_all(ds, PAPER_ESTIMATORS)
        truth = wald_truth(strata)
        worst = max(worst, max(abs(r.delta_hat - truth) for r in reports))
    single = [(0.0, 1.0, 0.5, 0.2, 0.8, 0.4, 0.7)]
    ds = enumerated_population(single)
    reports, _ = estimate_all(ds, PAPER_ESTIMATORS)
    worst = max(worst, max(abs(r.delta_hat - 0.5) for r in reports))
    tsls = abs(estimate_2sls(ds).delta_hat - 0.5)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and tsls < 1e-8 and elapsed < 10.0
    assert record(2, ok, f"max |estimate - enumerated truth| {worst:.2e} over six estimators, "
                         f"2SLS vs Wald {tsls:.2e}, {elapsed:.2f}s")


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_table_reproduction():
    problems, notes, total_time = [], [], 0.0
    for sc in SCENARIOS:
        rows, _, secs = monte_carlo(sc)
        total_time += secs
        for est, pub in PUBLISHED_BIAS[sc].items():
            got = rows[est]
            if abs(pub) <= 0.011:
                if abs(got.bias) > abs(pub) + 3 * 0.005:
                    problems.append(f"{sc}/{est} bias {got.bias:.3f} (published {pub:.3f})")
        for s, est in CLEARLY_BIASED:
            if s == sc:
                got, pub = rows[est].bias, PUBLISHED_BIAS[sc][est]
                notes.append(f"{sc}/{est} {got:.3f} vs {pub:.3f}")
                if np.sign(got) != np.sign(pub) or abs(got - pub) > 0.05:
                    problems.append(f"{sc}/{est} bias {got:.3f} (published {pub:.3f} +- 0.05)")
        for s, est, floor in DIVERGENT_RMSE:
            if s == sc and not rows[est].rmse > floor:
                problems.append(f"{sc}/{est} RMSE {rows[est].rmse:.1f} not above {floor:g}")
    detail = "; ".join(problems) if problems else "all cells within tolerance"
    assert record(3, not problems, f"{detail} [biased cells: {', '.join(notes)}; "
                                   f"{total_time / 60:.1f} min]")


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_out_of_bounds():
    rows, _, _ = monte_carlo("m3")
    rate = rows["mr"].frac_out_of_bounds
    bmr_bad = 0
    for sc in SCENARIOS:
        _, results, _ = monte_carlo(sc)
        vals = np.array([r.estimates.get("b-mr", np.nan) for r in results])
        bmr_bad += int(np.sum(~(np.abs(vals) <= 1.0)))
    ok = abs(rate - 0.776) <= 0.05 and bmr_bad == 0
    assert record(4, ok, f"mr out of [-1, 1] in {rate:.1%} of M3-only replicates (target 77.6% +- 5); "
                         f"b-mr outside or missing in {bmr_bad} of 5000")


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_influence_function():
    worst_mean = 0.0
    for rep in range(25):
        for code in ("CCCC", "CWCW", "WWWW"):
            ds, _ = generate(500, seed=55, rep=rep)
            report = estimate_mr(ds, config_for(code))
            worst_mean = max(worst_mean, abs(ds.mean(report.influence_values)))
    spec = ScenarioSpec("all-correct", n=500, reps=1000, seed=MC_SEED + 1, estimators=("mr",),
                        variance=True, workers=default_workers())
    rows, results = run_monte_carlo(spec)
    row = rows[0]
    # no SE is reported where the equations have no exact root
    withheld = sum("mr" not in r.se for r in results)
    ratio = row.mean_se / row.mc_sd
    ok = worst_mean < 1e-12 and abs(ratio - 1.0) <= 0.15
    assert record(5, ok, f"max |mean influence| {worst_mean:.1e}; mean sandwich SE {row.mean_se:.4f} "
                         f"vs MC SD {row.mc_sd:.4f} (ratio {ratio:.3f}; SE withheld in "
                         f"{withheld} of {len(results)} replicates without an exact root)")


# -- 6 ---------------------------------------------------------------------

def test_criterion_6_score_gradients():
    ds, _ = generate(1000, seed=66)
    x = ds.columns(["intercept", "x2"])
    rng = np.random.default_rng(6)
    worst = {}
    ll, gr, _ = propensity_loglik_parts(ds, x)
    worst["propensity"] = max(_rel(gr(t), fd_grad(ll, t)) for t in rng.normal(size=(100, 2)))
    ll, gr, _, _ = treatment_parts(ds, x, x, "tanh")
    worst["treatment"] = max(_rel(gr(t), fd_grad(ll, t)) for t in rng.normal(scale=0.7, size=(100, 4)))
    rd_d = np.tanh(x @ np.array([0.0, -0.5]))
    ll, gr, _, _ = outcome_parts(ds, x, x, rd_d)
    worst["outcome"] = max(_rel(gr(t), fd_grad(ll, t)) for t in rng.normal(scale=0.7, size=(100, 4)))
    ok = max(worst.values()) < 1e-5
    assert record(6, ok, "max relative score error " +
                  ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-3))


# -- 7 ---------------------------------------------------------------------

def test_criterion_7_ensemble_propensity():
    ds, _ = generate(100_000, seed=77)
    fit = fit_propensity_ensemble(ds, [["intercept", "x2"], ["intercept", "x2_dagger"]])
    w_correct, w_decoy = fit.coefficients
    ok = 0.9 <= w_correct <= 1.1
    assert record(7, ok, f"mixture weight on the correct model {w_correct:.3f} "
                         f"(decoy {w_decoy:.3f})")


# -- 8 ---------------------------------------------------------------------

def test_criterion_8_diagnostics():
    z1 = [(1, 1, 1)] * 6 + [(1, 0, 0)] * 4
    z0 = [(0, 1, 0)] * 5 + [(0, 0, 1)] * 5
    arr = np.array((z1 + z0) * 20, dtype=float)
    flagged = iv_screen(from_arrays(arr[:, 0], arr[:, 1], arr[:, 2])).violation
    passes = [not iv_screen(generate(10_000, seed=88, rep=r)[0]).violation for r in range(5)]
    rng = np.random.default_rng(8)
    lo, hi = feasibility_band(*rng.random((4, 1_000_000)))
    band_ok = bool(np.all(lo <= hi))
    ok = flagged and all(passes) and band_ok
    assert record(8, ok, f"violation fixture flagged={flagged}; DGP samples passing "
                         f"{sum(passes)}/5; band lo <= hi on 1e6 draws={band_ok}")


# -- 9 ---------------------------------------------------------------------

COVERAGE_DATASETS, COVERAGE_BOOT = 500, 200


def _coverage_chunk(reps):
    cfg = config_for("CCCC", approximate_roots=True)
    out = []
    for rep in reps:
        ds, _ = generate(500, seed=MC_SEED + 9, rep=rep)
        try:
            res = bootstrap_ci(ds, "b-mr", BootstrapConfig(COVERAGE_BOOT, seed=rep),
                               estimator_config=cfg)
            lo, hi = res.ci
            out.append((rep, lo <= TRUE_DELTA <= hi, res.extra["bootstrap_failures"],
                        res.extra["bootstrap_approximate"]))
        except NumericalError:
            out.append((rep, None, COVERAGE_BOOT, 0))
    return out


def _confounded_csv(path, n=20_000, effect=0.2):
    rng = np.random.default_rng(909)
    u = rng.random(n) < 0.5
    z = rng.random(n) < 0.5
    d = rng.random(n) < 0.2 + 0.4 * z + 0.3 * u
    y = rng.random(n) < 0.5 + effect * d - 0.3 * u
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "d", "y"])
        w.writerows(np.column_stack([z, d, y]).astype(int).tolist())


def test_criterion_9_bootstrap(tmp_path):
    ds, _ = generate(500, seed=99)
    cfg = config_for("CCCC", approximate_roots=True)
    runs = [bootstrap_ci(ds, "b-mr", BootstrapConfig(50, seed=3), estimator_config=cfg)
            for _ in range(2)]
    deterministic = runs[0].ci == runs[1].ci and np.array_equal(
        runs[0].extra["replicates"], runs[1].extra["replicates"], equal_nan=True)

    const = from_arrays([0, 1] * 10, [0, 1, 1, 0] * 5, [1.0] * 20)
    point = bootstrap_ci(const, lambda d: d.mean(d.y), BootstrapConfig(100, seed=1)).ci == (1.0, 1.0)

    t0 = time.perf_counter()
    reps = list(range(COVERAGE_DATASETS))
    workers = default_workers()
    chunks = [reps[i::workers] for i in range(workers)]
    if workers == 1:
        results = _coverage_chunk(reps)
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = [r for part in pool.map(_coverage_chunk, chunks) for r in part]
    covered = [c for _, c, _, _ in results if c is not None]
    unstable = sum(c is None for _, c, _, _ in results)
    # an unstable bootstrap yields no interval, which counts as not covering
    coverage = sum(covered) / COVERAGE_DATASETS
    approx = sum(a for *_, a in results)
    minutes = (time.perf_counter() - t0) / 60

    path = tmp_path / "confounded.csv"
    _confounded_csv(path)
    out = tmp_path / "fit.csv"
    code = main(["fit", "--data", str(path), "--instrument", "z", "--treatment", "d",
                 "--outcome", "y", "--estimators", "crude,2sls", "--out", str(out)])
    vals = {r["estimator"]: float(r["delta_hat"]) for r in csv.DictReader(open(out))}
    ordering = code == 0 and vals["crude"] < vals["2sls"] and abs(vals["2sls"] - 0.2) < 0.05

    ok = deterministic and point and 0.90 <= coverage <= 0.985 and ordering
    assert record(9, ok, f"deterministic={deterministic}; degenerate CI is a point={point}; "
                         f"b-mr coverage {coverage:.3f} over {COVERAGE_DATASETS}x{COVERAGE_BOOT} "
                         f"({unstable} unstable, {approx} approximate-root replicates, "
                         f"{minutes:.0f} min); crude {vals['crude']:.3f} < 2SLS {vals['2sls']:.3f}"
                         f"={ordering}")
