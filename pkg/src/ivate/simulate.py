"""Simulation study: data-generating process, misspecification scenarios and
the Monte Carlo runner.

Covariates are an intercept and ``x2`` uniform on (-1,-0.5) U (0.5,1); an
unmeasured binary confounder ``u`` shifts the treatment and outcome
probabilities by ``kappa (2u - 1)``. Misspecified model blocks use the decoy
design ``(intercept, x2_dagger)`` with ``x2_dagger ~ N(0, 1)`` independent of
everything else.
"""
import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import expit

from .data import Dataset, from_arrays
from .errors import IVError, NumericalError
from .estimators import (EstimatorConfig, FitCache, PAPER_ESTIMATORS, _signed_ipw,
                         alpha_dr, beta_dr, estimate_all, rd_d_values)
from .param import p0_from_rd_op

ALPHA = np.array([0.1, 0.5])
BETA = np.array([0.0, -0.5])
GAMMA = np.array([0.1, -0.5])
ZETA = np.array([0.0, -1.0])
ETA = np.array([-0.5, 1.0])
KAPPA = 0.1

CORRECT = ("intercept", "x2")
DECOY = ("intercept", "x2_dagger")
BLOCKS = ("delta", "delta_d", "propensity", "op")


def rng_for(seed, rep=0):
    """Counter-based Philox stream keyed by ``(seed, rep)``.

    Each replicate's stream is independent of how many others are drawn.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(rep)])))


def true_delta(x2, alpha=ALPHA):
    return np.tanh(alpha[0] + alpha[1] * x2)


def population_delta(alpha=ALPHA):
    """Average Wald estimand by quadrature over the two-interval support."""
    f = lambda t: math.tanh(alpha[0] + alpha[1] * t)
    lo, _ = integrate.quad(f, -1.0, -0.5, epsabs=1e-13, epsrel=1e-13)
    hi, _ = integrate.quad(f, 0.5, 1.0, epsabs=1e-13, epsrel=1e-13)
    return lo + hi       # interval mass 1/2 each, density 1 on each piece


TRUE_DELTA = population_delta()


@dataclass
class Truth:
    u: np.ndarray
    delta: np.ndarray
    delta_d: np.ndarray
    pi: np.ndarray


def cell_probabilities(x2, kappa=KAPPA):
    """True ``P(Z=1|x)``, ``p0^D``, ``delta^D``, ``p0^Y``, ``delta`` at ``x2``."""
    xb = np.column_stack([np.ones_like(x2), x2])
    pi = expit(xb @ GAMMA)
    rd_d = np.tanh(xb @ BETA)
    p0d = p0_from_rd_op(rd_d, np.exp(xb @ ETA))
    delta = np.tanh(xb @ ALPHA)
    p0y = p0_from_rd_op(delta * rd_d, np.exp(xb @ ZETA))
    return pi, p0d, rd_d, p0y, delta


def draw_x2(rng, n):
    return rng.uniform(0.5, 1.0, n) * rng.choice([-1.0, 1.0], n)


def generate(n, seed, rep=0, *, kappa=KAPPA, rng=None):
    """Draw one sample; returns ``(Dataset, Truth)``.

    Dataset covariates: ``intercept, x2, x2_dagger``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = rng or rng_for(seed, rep)
    x2 = draw_x2(rng, n)
    u = (rng.random(n) < 0.5).astype(float)
    dagger = rng.standard_normal(n)
    pi, p0d, rd_d, p0y, delta = cell_probabilities(x2, kappa)
    z = (rng.random(n) < pi).astype(float)
    shift = kappa * (2.0 * u - 1.0)
    pd = p0d + z * rd_d + shift
    py = p0y + z * rd_d * delta + shift
    if np.any((pd < 0) | (pd > 1) | (py < 0) | (py > 1)):
        raise AssertionError("DGP integrity: conditional probability outside [0, 1]")
    d = (rng.random(n) < pd).astype(float)
    y = (rng.random(n) < py).astype(float)
    ds = from_arrays(z, d, y, np.column_stack([x2, dagger]), binary_outcome=True,
                     column_names=["x2", "x2_dagger"], metadata={"seed": seed, "rep": rep})
    return ds, Truth(u, delta, rd_d, pi)


# -- scenarios -------------------------------------------------------------

NAMED_SCENARIOS = {
    # block order: delta, delta_d, propensity, op
    "all-correct": "CCCC",
    "m1": "CCWC",
    "m2": "WCCW",
    "m3": "CWCW",
    "all-wrong": "WWWW",
}
ALIASES = {"m1-correct": "m1", "m2-correct": "m2", "m3-correct": "m3", "all-incorrect": "all-wrong"}


def scenario_code(name):
    """Resolve a named scenario or a 4-letter C/W grid code (delta, delta_d, f, OP)."""
    key = ALIASES.get(name, name)
    if key in NAMED_SCENARIOS:
        return NAMED_SCENARIOS[key]
    code = key.upper().removeprefix("GRID:")
    if len(code) == 4 and set(code) <= {"C", "W"}:
        return code
    raise ValueError(f"unknown scenario {name!r}; use one of {sorted(NAMED_SCENARIOS)} "
                     "or a 4-letter C/W code")


def grid_codes():
    """All 16 correct/wrong combinations."""
    return ["".join(c) for c in np.array(np.meshgrid(*[["C", "W"]] * 4, indexing="ij")).reshape(4, -1).T]


def config_for(code, variance=False, approximate_roots=True) -> EstimatorConfig:
    """Estimator configuration for a scenario code.

    The b-ipw working model uses the treatment-difference covariates.
    Under misspecification some estimating equations have no exact root in a
    given sample; by default their least-squares minimiser is used and the
    replicate is counted as non-converged.
    """
    pick = {k: (CORRECT if c == "C" else DECOY) for k, c in zip(BLOCKS, code)}
    return EstimatorConfig(delta=pick["delta"], delta_d=pick["delta_d"], op_d=pick["op"],
                           op_y=pick["op"], propensity=pick["propensity"],
                           working=pick["delta_d"], tsls=CORRECT, variance=variance,
                           approximate_roots=approximate_roots)


@dataclass
class ScenarioSpec:
    scenario: str = "all-correct"
    n: int = 500
    reps: int = 1000
    seed: int = 1
    estimators: Sequence[str] = PAPER_ESTIMATORS
    variance: bool = False
    approximate_roots: bool = True
    workers: int = 1
    truth: float = TRUE_DELTA

    @property
    def code(self):
        return scenario_code(self.scenario)


@dataclass
class ReplicateResult:
    rep: int
    estimates: Dict[str, float]
    se: Dict[str, float] = field(default_factory=dict)
    errors: Dict[str, str] = field(default_factory=dict)


def run_replicate(spec: ScenarioSpec, rep: int) -> ReplicateResult:
    ds, _ = generate(spec.n, spec.seed, rep)
    reports, _ = estimate_all(ds, spec.estimators, config_for(spec.code, spec.variance, spec.approximate_roots),
                              on_error="record")
    out = ReplicateResult(rep, {})
    for r in reports:
        out.estimates[r.estimator_tag] = r.delta_hat
        if r.se is not None:
            out.se[r.estimator_tag] = r.se
        if not r.converged:
            out.errors[r.estimator_tag] = "; ".join(r.warnings) or "failed"
    return out


def _run_chunk(args):
    spec, reps = args
    return [run_replicate(spec, r) for r in reps]


def run_replicates(spec: ScenarioSpec) -> List[ReplicateResult]:
    reps = list(range(spec.reps))
    if spec.workers <= 1:
        return [run_replicate(spec, r) for r in reps]
    chunks = [reps[i::spec.workers] for i in range(spec.workers)]
    with ProcessPoolExecutor(spec.workers) as pool:
        done = [res for part in pool.map(_run_chunk, [(spec, c) for c in chunks]) for res in part]
    return sorted(done, key=lambda r: r.rep)


@dataclass
class SummaryRow:
    estimator: str
    bias: float
    mc_se: float
    rmse: float
    median_bias: float
    frac_out_of_bounds: float
    failures: int
    nonconverged: int = 0
    mean_se: float = math.nan
    mc_sd: float = math.nan


def summarize(results: List[ReplicateResult], estimators, truth=TRUE_DELTA) -> List[SummaryRow]:
    """Bias, Monte Carlo SE of the bias, RMSE and out-of-bounds fraction.

    Failed replicates are excluded from the moments and counted.
    """
    rows = []
    for name in estimators:
        vals = np.array([r.estimates.get(name, np.nan) for r in results])
        ok = np.isfinite(vals)
        v = vals[ok]
        fails = int((~ok).sum())
        nonconv = sum(name in r.errors for r in results)
        if v.size == 0:
            rows.append(SummaryRow(name, *([math.nan] * 5), fails, nonconv))
            continue
        err = v - truth
        ses = np.array([r.se.get(name, np.nan) for r in results])[ok]
        sd = float(v.std(ddof=1)) if v.size > 1 else math.nan
        rows.append(SummaryRow(
            name, float(err.mean()), sd / math.sqrt(v.size) if v.size > 1 else math.nan,
            float(np.sqrt(np.mean(err ** 2))), float(np.median(err)),
            float(np.mean(np.abs(v) > 1.0)), fails, nonconv,
            float(np.nanmean(ses)) if np.any(np.isfinite(ses)) else math.nan, sd))
    return rows


def run_monte_carlo(spec: ScenarioSpec, replicate_csv=None):
    """Run a scenario; returns ``(summary rows, replicate results)``."""
    results = run_replicates(spec)
    if replicate_csv:
        write_replicates(results, spec.estimators, replicate_csv)
    return summarize(results, spec.estimators, spec.truth), results


SUMMARY_FIELDS = ("estimator", "bias", "mc_se", "rmse", "median_bias", "frac_out_of_bounds",
                  "failures", "nonconverged", "mean_se", "mc_sd")


def write_summary(groups, path):
    """Write summary rows for one or more scenarios: ``groups`` is ``[(scenario, rows)]``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scenario",) + SUMMARY_FIELDS)
        for scenario, rows in groups:
            for r in rows:
                w.writerow([scenario] + [_fmt(getattr(r, k)) for k in SUMMARY_FIELDS])


def write_replicates(results, estimators, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep"] + list(estimators))
        for r in results:
            w.writerow([r.rep] + [_fmt(r.estimates.get(e, math.nan)) for e in estimators])


def _fmt(v):
    if isinstance(v, (int, np.integer)) or isinstance(v, str):
        return str(v)
    return "NA" if not math.isfinite(v) else f"{v:.17g}"


def format_summary(rows, title=""):
    lines = [title] if title else []
    lines.append(f"{'estimator':<10}{'bias':>12}{'(mc se)':>10}{'rmse':>12}{'|est|>1':>9}{'fail':>6}{'nonconv':>9}")
    for r in rows:
        lines.append(f"{r.estimator:<10}{r.bias:>12.3f}{'(' + format(r.mc_se, '.3f') + ')':>10}"
                     f"{r.rmse:>12.3f}{r.frac_out_of_bounds:>9.3f}{r.failures:>6d}{r.nonconverged:>9d}")
    return "\n".join(lines)


# -- alternative EIF parameterisation (negative fixture) --------------------

def _delta_y_direct(cache, cols):
    """Fit ``delta^Y(x) = tanh(psi'x)`` by projecting the IPW contrast."""
    from .mestimate import Stack, solve

    xmat = cache.ds.columns(cols)
    contrast = cache.ds.y * _signed_ipw(cache, cache.f)

    def fn(ds, p):
        return xmat * (contrast - np.tanh(xmat @ p["psi"]))[:, None]

    res = solve(Stack().add("psi", xmat.shape[1], fn).system("delta_y projection"), cache.ds,
                np.zeros(xmat.shape[1]))
    return np.tanh(xmat @ res.theta_hat)


def eif_form_estimates(ds, config: EstimatorConfig, delta_y_cols=CORRECT):
    """Estimates from both EIF parameterisations on one dataset.

    ``eif_delta`` is the Wald-ratio parameterisation used by mr;
    ``eif_delta_y`` replaces ``delta(x)`` by a directly modelled
    ``delta^Y(x)`` divided by the fitted ``delta^D(x)`` (which is not
    robust when only the propensity and ``delta^Y`` models are right).
    """
    cache = FitCache(ds, config)
    b = beta_dr(cache)
    a = alpha_dr(cache, bounded=True)
    rd = rd_d_values(cache, b)
    p0d, p0y = cache.baselines
    w = _signed_ipw(cache, cache.f)
    dy = _delta_y_direct(cache, delta_y_cols)
    alt = w * (ds.y / rd - p0y / rd - ds.d * dy / rd ** 2 + p0d * dy / rd ** 2) + dy / rd
    delta = np.tanh(cache.x("delta") @ a)
    wald_form = w * (ds.y - ds.d * delta - p0y + p0d * delta) / rd + delta
    return {"eif_delta": float(ds.mean(wald_form)), "eif_delta_y": float(ds.mean(alt)),
            "b-mr": float(ds.mean(delta))}


def _eif_form_rep(args):
    spec, rep = args
    ds, _ = generate(spec.n, spec.seed, rep)
    try:
        return rep, eif_form_estimates(ds, config_for(spec.code))
    except (IVError, np.linalg.LinAlgError):
        return rep, {}


def eif_form_fixture(spec: ScenarioSpec):
    """Monte Carlo comparison of the two EIF parameterisations.

    Returns summary rows for ``eif_delta`` (mr form), ``eif_delta_y`` and
    ``b-mr``. Documentation fixture, not a user-facing estimator.
    """
    names = ("eif_delta", "eif_delta_y", "b-mr")
    results = [ReplicateResult(rep, est) for rep, est in map(_eif_form_rep, [(spec, r) for r in range(spec.reps)])]
    return summarize(results, names, spec.truth), results
