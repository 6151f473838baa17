"""Percentile bootstrap confidence intervals."""
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import IVError, NumericalError
from .estimators import EstimateReport, EstimatorConfig, FitCache, estimate

FAILURE_POLICIES = ("drop-and-report", "abort")
MAX_FAILURE_SHARE = 0.20


@dataclass
class BootstrapConfig:
    replicates: int = 1000
    seed: int = 0
    ci_level: float = 0.95
    failure_policy: str = "drop-and-report"
    workers: int = 1

    def __post_init__(self):
        if int(self.replicates) < 1:
            raise ValueError("replicates must be >= 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")
        if self.failure_policy not in FAILURE_POLICIES:
            raise ValueError(f"failure_policy must be one of {FAILURE_POLICIES}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def quantile(values, q):
    """Type-7 (linear interpolation between order statistics) sample quantile."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("quantile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    h = (v.size - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def replicate_rows(seed, r, n):
    """Row indices of bootstrap replicate ``r``: Philox stream keyed by (seed, r)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(r)])))
    return rng.integers(0, n, size=n)


def _tag_source(tag):
    return "late-ett" if tag in ("late", "ett") else tag


def _point(ds, estimator, config, warm):
    """Evaluate ``estimator`` (registry tag or callable ``ds -> float``)."""
    if callable(estimator):
        return float(estimator(ds)), None
    cache = FitCache(ds, config, warm=warm)
    for rep in estimate(ds, _tag_source(estimator), cache=cache):
        if rep.estimator_tag == estimator:
            return rep.delta_hat, (rep, cache)
    raise ValueError(f"estimator {estimator!r} produced no report")


def _run_replicates(args):
    """``(r, value or None, error message or None, exact root flag)`` per replicate."""
    ds, estimator, config, warm, seed, indices = args
    out = []
    for r in indices:
        try:
            val, full = _point(ds.take(replicate_rows(seed, r, ds.n)), estimator, config, warm)
        except (IVError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out.append((r, None, f"{type(exc).__name__}: {exc}", False))
            continue
        exact = full is None or full[0].converged
        if math.isfinite(val):
            out.append((r, val, None, exact))
        else:
            out.append((r, None, "non-finite estimate", exact))
    return out


def bootstrap_ci(ds, estimator: Union[str, Callable], config: Optional[BootstrapConfig] = None,
                 *, estimator_config: Optional[EstimatorConfig] = None) -> EstimateReport:
    """Quantile-based nonparametric bootstrap CI for one estimator.

    Rows are resampled with replacement and keep their sampling weights,
    renormalised to mean 1. Replicate fits start from the full-sample
    solutions. Replicate values are returned in ``extra["replicates"]``
    (NaN for failures) in replicate order. With ``approximate_roots`` in
    ``estimator_config``, replicates whose equations have no exact root keep
    their least-squares solution and are counted in
    ``extra["bootstrap_approximate"]``; otherwise they count as failures.
    """
    cfg = config or BootstrapConfig()
    est, full = _point(ds, estimator, estimator_config, None)
    if full is None:
        report, warm = EstimateReport(getattr(estimator, "__name__", "statistic"), est), None
    else:
        report, cache = full
        warm = dict(cache.solutions)
    if not math.isfinite(est):
        raise NumericalError("full-sample estimate is not finite", estimator=report.estimator_tag)

    reps = list(range(int(cfg.replicates)))
    workers = max(1, int(cfg.workers))
    if workers == 1 or callable(estimator):
        results = _run_replicates((ds, estimator, estimator_config, warm, cfg.seed, reps))
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = pool.map(_run_replicates, [(ds, estimator, estimator_config, warm, cfg.seed, c)
                                               for c in chunks])
            results = sorted((x for part in parts for x in part), key=lambda t: t[0])

    values = np.array([np.nan if v is None else v for _, v, _, _ in results])
    failures = [(r, msg) for r, v, msg, _ in results if v is None]
    approximate = sum(1 for _, v, _, exact in results if v is not None and not exact)
    if failures and cfg.failure_policy == "abort":
        r, msg = failures[0]
        raise NumericalError(f"bootstrap replicate {r} failed: {msg}", estimator=report.estimator_tag)
    if len(failures) > MAX_FAILURE_SHARE * len(reps):
        raise NumericalError(f"{len(failures)} of {len(reps)} bootstrap replicates failed; "
                             "estimate is unstable", estimator=report.estimator_tag)
    ok = values[np.isfinite(values)]
    alpha = 1.0 - cfg.ci_level
    report.ci = (quantile(ok, alpha / 2.0), quantile(ok, 1.0 - alpha / 2.0))
    report.extra.update(replicates=values, bootstrap_failures=len(failures),
                        bootstrap_approximate=approximate, bootstrap_seed=cfg.seed,
                        ci_level=cfg.ci_level)
    if failures:
        report.warnings.append(f"{len(failures)} bootstrap replicates failed and were dropped")
    if approximate:
        report.warnings.append(f"{approximate} bootstrap replicates used approximate roots")
    return report


def default_workers():
    return os.cpu_count() or 1
