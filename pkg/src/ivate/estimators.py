"""Estimators of the average Wald estimand and the comparison baselines.

Paper estimators: ``b-reg``, ``ipw``, ``b-ipw``, ``g``, ``mr``, ``b-mr``.
Baselines: ``crude``, ``2sls`` and the plug-in LATE/ETT comparators.

All estimators evaluated on one dataset share a :class:`FitCache`, so the
propensity and two-step MLE fits are computed once.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import INTERCEPT, Dataset, require_complete
from .errors import (ConvergenceError, DataError, DegenerateDataError, IVError,
                     NumericalError, PositivityError, SingularMatrixError)
from .mestimate import Stack, sandwich_variance, solve
from .nuisance import (NuisanceFit, fit_linear_nuisances, fit_outcome_2mle, fit_propensity,
                       fit_propensity_ensemble, fit_treatment_2mle, outcome_parts,
                       treatment_parts, weighted_lstsq)
from .param import link_delta, p0_from_rd_op

log = logging.getLogger(__name__)

PAPER_ESTIMATORS = ("b-reg", "ipw", "b-ipw", "g", "mr", "b-mr")
BASELINES = ("crude", "2sls", "late-ett")
REGISTRY = PAPER_ESTIMATORS + BASELINES
BOUNDED = ("b-reg", "b-ipw", "g", "b-mr")

POSITIVITY_WARN = 0.01
MR_INSTABILITY = 1e-6


@dataclass
class EstimatorConfig:
    """Model designs (covariate column names; ``None`` = all columns) and options.

    ``working`` is the b-ipw working model design and defaults to the
    ``delta_d`` design. Index-function overrides ``h1, h2, h3, h, g`` are
    callables ``fn(ds, default)`` returning a matrix of the default's shape.
    With ``approximate_roots`` an estimating equation without an exact root
    is replaced by its least-squares minimiser and the estimate is flagged
    ``converged=False`` instead of raising.
    """
    delta: Optional[Sequence[str]] = None
    delta_d: Optional[Sequence[str]] = None
    op_d: Optional[Sequence[str]] = None
    op_y: Optional[Sequence[str]] = None
    propensity: Optional[Sequence[str]] = None
    working: Optional[Sequence[str]] = None
    propensity_candidates: Optional[List[Sequence[str]]] = None
    tsls: Optional[Sequence[str]] = None
    delta_d_link: str = "tanh"
    h1: Optional[Callable] = None
    h2: Optional[Callable] = None
    h3: Optional[Callable] = None
    h: Optional[Callable] = None
    g: Optional[Callable] = None
    variance: bool = False
    approximate_roots: bool = False

    @property
    def working_cols(self):
        return self.working if self.working is not None else self.delta_d


@dataclass
class EstimateReport:
    estimator_tag: str
    delta_hat: float
    in_bounds: Optional[bool] = None
    nuisance_fits: List[NuisanceFit] = field(default_factory=list)
    se: Optional[float] = None
    ci: Optional[Tuple[float, float]] = None
    influence_values: Optional[np.ndarray] = None
    converged: bool = True
    warnings: List[str] = field(default_factory=list)
    extra: Dict = field(default_factory=dict)


def _bounds_flag(ds, value):
    if not ds.binary_outcome:
        return None
    return bool(np.isfinite(value) and abs(value) <= 1.0)


def _index(fn, ds, default):
    if fn is None:
        return default
    out = np.asarray(fn(ds, default), dtype=float)
    if out.shape != default.shape:
        raise ValueError(f"index function returned shape {out.shape}, expected {default.shape}")
    return out


def _replace_intercept(design, names, column):
    """Swap the intercept slot (or the first column) for ``column``."""
    j = names.index(INTERCEPT) if INTERCEPT in names else 0
    out = design.copy()
    out[:, j] = column
    return out


class FitCache:
    """Lazily computed nuisance fits and solved equations for one dataset.

    ``warm`` maps solution names to starting values (e.g. the full-sample
    solution when refitting on a bootstrap replicate).
    """

    def __init__(self, ds: Dataset, config: Optional[EstimatorConfig] = None, warm=None):
        self.ds = ds
        self.cfg = config or EstimatorConfig()
        self.warm = dict(warm or {})
        self.solutions: Dict[str, np.ndarray] = {}
        self.approximate: Dict[str, float] = {}
        self._store: Dict[str, object] = {}
        for cols in (self.cfg.delta, self.cfg.delta_d, self.cfg.op_d, self.cfg.op_y,
                     self.cfg.propensity, self.cfg.working):
            require_complete(ds, cols)

    def _note(self, fit, key):
        if not fit.converged:
            self.approximate[key] = fit.final_gradient_norm

    def _memo(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]

    def _init(self, key, dim):
        w = self.warm.get(key)
        if w is not None and np.size(w) == dim and np.all(np.isfinite(w)):
            return np.array(w, dtype=float)
        return np.zeros(dim)

    def _solve(self, key, stack_block, dim, label):
        def build():
            system = Stack().add(key, dim, stack_block).system(label)
            res = solve(system, self.ds, self._init(key, dim),
                        approximate=self.cfg.approximate_roots)
            if not res.converged:
                self.approximate[key] = res.residual_norm
            self.solutions[key] = res.theta_hat
            return res.theta_hat
        return self._memo(key, build)

    def x(self, which):
        """Design matrix of one model block (memoised)."""
        key = "x:" + which
        if key not in self._store:
            cols = {"delta": self.cfg.delta, "delta_d": self.cfg.delta_d, "op_d": self.cfg.op_d,
                    "op_y": self.cfg.op_y, "propensity": self.cfg.propensity,
                    "working": self.cfg.working_cols}[which]
            self._store[key] = self.ds.columns(cols)
        return self._store[key]

    def names(self, which):
        cols = getattr(self.cfg, which) if which != "working" else self.cfg.working_cols
        return list(cols) if cols is not None else list(self.ds.column_names)

    # -- nuisance fits --------------------------------------------------
    @property
    def propensity(self) -> NuisanceFit:
        def build():
            if self.cfg.propensity_candidates:
                return fit_propensity_ensemble(self.ds, self.cfg.propensity_candidates)
            fit = fit_propensity(self.ds, self.cfg.propensity, init=self.warm.get("gamma"),
                                 approximate=self.cfg.approximate_roots)
            self._note(fit, "propensity")
            self.solutions["gamma"] = fit.coefficients
            return fit
        return self._memo("propensity", build)

    @property
    def f(self):
        """Fitted ``f(Z_i | X_i)`` per unit."""
        def build():
            f = self.propensity.extra["evaluator"].density(self.ds)
            if np.any(f <= 0.0):
                raise PositivityError("fitted instrument propensity is 0 for some units",
                                      nuisance="propensity")
            return f
        return self._memo("f", build)

    @property
    def treatment(self) -> NuisanceFit:
        def build():
            fit = fit_treatment_2mle(self.ds, self.cfg.delta_d, self.cfg.op_d,
                                     link=self.cfg.delta_d_link, init=self.warm.get("beta_eta"),
                                     approximate=self.cfg.approximate_roots)
            self._note(fit, "treatment")
            self.solutions["beta_eta"] = fit.coefficients
            return fit
        return self._memo("treatment", build)

    @property
    def outcome(self) -> NuisanceFit:
        def build():
            fit = fit_outcome_2mle(self.ds, self.treatment.part("beta"), self.cfg.delta_d,
                                   self.cfg.delta, self.cfg.op_y, link=self.cfg.delta_d_link,
                                   init=self.warm.get("alpha_zeta"),
                                   approximate=self.cfg.approximate_roots)
            self._note(fit, "outcome")
            self.solutions["alpha_zeta"] = fit.coefficients
            return fit
        return self._memo("outcome", build)

    @property
    def linear(self):
        def build():
            theta, iota = fit_linear_nuisances(self.ds, self.cfg.delta_d, self.cfg.op_d,
                                               self.cfg.op_y, link=self.cfg.delta_d_link)
            self.solutions["beta_eta"] = theta.coefficients
            return theta, iota
        return self._memo("linear", build)

    @property
    def baselines(self):
        """Plug-in ``(p0^D(x), p0^Y(x))`` used by the doubly robust equations."""
        def build():
            if self.ds.binary_outcome:
                be, az = self.treatment.coefficients, self.outcome.coefficients
                return (p0d_values(self, be), p0y_values(self, az, be))
            theta, iota = self.linear
            return p0d_values(self, theta.coefficients), self.ds.columns(self.cfg.op_y) @ iota.coefficients
        return self._memo("baselines", build)

    def nuisance_fits(self, *names):
        return [getattr(self, n) for n in names]


# -- shared model pieces (all take parameter vectors explicitly) -----------

def rd_d_values(cache, beta):
    return link_delta(cache.cfg.delta_d_link, cache.x("delta_d") @ beta)


def delta_values(cache, alpha, which="delta"):
    eta = cache.x(which) @ alpha
    return np.tanh(eta) if cache.ds.binary_outcome else eta


def f_values(cache, gamma):
    pi = expit(cache.x("propensity") @ gamma)
    return np.where(cache.ds.z == 1, pi, 1.0 - pi)


def p0d_values(cache, beta_eta):
    pb = cache.x("delta_d").shape[1]
    rd = rd_d_values(cache, beta_eta[:pb])
    return p0_from_rd_op(rd, np.exp(cache.x("op_d") @ beta_eta[pb:]))


def p0y_values(cache, alpha_zeta, beta_eta):
    pa = cache.x("delta").shape[1]
    pb = cache.x("delta_d").shape[1]
    delta = np.tanh(cache.x("delta") @ alpha_zeta[:pa])
    rd_y = delta * rd_d_values(cache, beta_eta[:pb])
    return p0_from_rd_op(rd_y, np.exp(cache.x("op_y") @ alpha_zeta[pa:]))


def _signed_ipw(cache, f):
    return (2.0 * cache.ds.z - 1.0) / f


def _check_rd(report_warnings, rd, label):
    m = float(np.min(np.abs(rd)))
    if m == 0.0:
        raise PositivityError(f"{label} is exactly 0 for some units")
    if m < POSITIVITY_WARN:
        report_warnings.append(f"min |{label}| = {m:.3g} below {POSITIVITY_WARN}")


def _check_f(report_warnings, f):
    m = float(np.min(f))
    if m < POSITIVITY_WARN:
        report_warnings.append(f"min f(Z|X) = {m:.3g} below {POSITIVITY_WARN}")


# -- estimating-equation blocks --------------------------------------------
# Each returns fn(ds, params) -> (n, k) per-unit contributions.

def _blk_gamma(cache):
    xf = cache.x("propensity")

    def fn(ds, p):
        return xf * (ds.z - expit(xf @ p["gamma"]))[:, None]
    return fn


def _blk_treatment(cache):
    scores = treatment_parts(cache.ds, cache.x("delta_d"), cache.x("op_d"),
                             cache.cfg.delta_d_link)[3]
    return lambda ds, p: scores(p["beta_eta"])


def _blk_outcome(cache):
    pb = cache.x("delta_d").shape[1]

    def fn(ds, p):
        rd_d = rd_d_values(cache, p["beta_eta"][:pb])
        scores = outcome_parts(ds, cache.x("delta"), cache.x("op_y"), rd_d)[3]
        return scores(p["alpha_zeta"])
    return fn


def _blk_iota(cache):
    xi = cache.x("op_y")

    def fn(ds, p):
        return xi * ((1.0 - ds.z) * (ds.y - xi @ p["iota"]))[:, None]
    return fn


def _f_from(cache, p):
    return f_values(cache, p["gamma"]) if "gamma" in p else cache.f


def _blk_beta_ipw(cache):
    h1 = _index(cache.cfg.h1, cache.ds, cache.x("delta_d"))

    def fn(ds, p):
        f = _f_from(cache, p)
        return h1 * (ds.d * _signed_ipw(cache, f) - rd_d_values(cache, p["beta_ipw"]))[:, None]
    return fn


def _ipw_pseudo(cache, p):
    f = _f_from(cache, p)
    return cache.ds.y * _signed_ipw(cache, f) / rd_d_values(cache, p["beta_ipw"])


def _blk_alpha_working(cache):
    h2 = _index(cache.cfg.h2, cache.ds, cache.x("working"))

    def fn(ds, p):
        return h2 * (_ipw_pseudo(cache, p) - delta_values(cache, p["alpha_working"], "working"))[:, None]
    return fn


def _blk_alpha_g(cache):
    h3 = _index(cache.cfg.h3, cache.ds, cache.x("delta"))

    def fn(ds, p):
        f = _f_from(cache, p)
        resid = ds.y - ds.d * delta_values(cache, p["alpha_g"])
        return h3 * (resid * _signed_ipw(cache, f))[:, None]
    return fn


def _baselines_from(cache, p):
    if "beta_eta" not in p:
        return cache.baselines
    if cache.ds.binary_outcome:
        return p0d_values(cache, p["beta_eta"]), p0y_values(cache, p["alpha_zeta"], p["beta_eta"])
    return p0d_values(cache, p["beta_eta"]), cache.x("op_y") @ p["iota"]


def _blk_beta_dr(cache):
    h = _index(cache.cfg.h, cache.ds, cache.x("delta_d"))

    def fn(ds, p):
        f = _f_from(cache, p)
        p0d, _ = _baselines_from(cache, p)
        resid = ds.d - rd_d_values(cache, p["beta_dr"]) * ds.z - p0d
        return h * (resid * _signed_ipw(cache, f))[:, None]
    return fn


def _dr_residual(cache, p, alpha):
    p0d, p0y = _baselines_from(cache, p)
    delta = delta_values(cache, alpha)
    ds = cache.ds
    return ds.y - ds.d * delta - p0y + p0d * delta, delta


def _blk_alpha_dr(cache, bounded):
    xa = cache.x("delta")
    key = "alpha_bdr" if bounded else "alpha_dr"
    default = None if bounded else _index(cache.cfg.g, cache.ds, xa)

    def fn(ds, p):
        f = _f_from(cache, p)
        if bounded:
            inv = 1.0 / rd_d_values(cache, p["beta_dr"])
            gmat = _index(cache.cfg.g, ds, _replace_intercept(xa, cache.names("delta"), inv))
        else:
            gmat = default
        resid, _ = _dr_residual(cache, p, p[key])
        return gmat * (resid * _signed_ipw(cache, f))[:, None]
    return fn


def _mr_summand(cache, p, alpha):
    f = _f_from(cache, p)
    resid, delta = _dr_residual(cache, p, alpha)
    return resid * _signed_ipw(cache, f) / rd_d_values(cache, p["beta_dr"]) + delta


# -- solved nuisance equations ----------------------------------------------

def beta_ipw(cache):
    dim = cache.x("delta_d").shape[1]
    blk = _blk_beta_ipw(cache)
    return cache._solve("beta_ipw", lambda ds, p: blk(ds, {"beta_ipw": p["beta_ipw"]}), dim,
                        "beta_ipw equation")


# The solves below hold every nuisance fixed, so the parts of each residual
# that do not move with the unknown are computed once. The generic blocks
# above are kept for the stacked sandwich systems.

def beta_dr(cache):
    dim = cache.x("delta_d").shape[1]
    ds = cache.ds
    h = _index(cache.cfg.h, ds, cache.x("delta_d"))
    s = _signed_ipw(cache, cache.f)
    p0d, _ = cache.baselines
    fixed = h * ((ds.d - p0d) * s)[:, None]
    moving = h * (ds.z * s)[:, None]
    return cache._solve("beta_dr",
                        lambda ds_, p: fixed - moving * rd_d_values(cache, p["beta_dr"])[:, None],
                        dim, "beta_dr equation")


def alpha_dr(cache, bounded=False):
    key = "alpha_bdr" if bounded else "alpha_dr"
    dim = cache.x("delta").shape[1]
    ds = cache.ds
    b_dr = beta_dr(cache)
    xa = cache.x("delta")
    if bounded:
        inv = 1.0 / rd_d_values(cache, b_dr)
        gmat = _index(cache.cfg.g, ds, _replace_intercept(xa, cache.names("delta"), inv))
    else:
        gmat = _index(cache.cfg.g, ds, xa)
    s = _signed_ipw(cache, cache.f)
    p0d, p0y = cache.baselines
    # residual (Y - p0y) - delta (D - p0d), weighted by the signed IPW factor
    fixed = gmat * ((ds.y - p0y) * s)[:, None]
    moving = gmat * ((ds.d - p0d) * s)[:, None]
    return cache._solve(key, lambda ds_, p: fixed - moving * delta_values(cache, p[key])[:, None],
                        dim, f"{key} equation")


# -- variance via stacked systems -------------------------------------------

def _nuisance_blocks(cache, stack, params, need_outcome=True):
    """Add propensity / likelihood score blocks needed by the DR equations."""
    ds = cache.ds
    stack.add("gamma", cache.x("propensity").shape[1], _blk_gamma(cache))
    params["gamma"] = cache.propensity.coefficients
    if ds.binary_outcome:
        stack.add("beta_eta", cache.treatment.coefficients.size, _blk_treatment(cache))
        params["beta_eta"] = cache.treatment.coefficients
        if need_outcome:
            stack.add("alpha_zeta", cache.outcome.coefficients.size, _blk_outcome(cache))
            params["alpha_zeta"] = cache.outcome.coefficients
    else:
        theta, iota = cache.linear
        stack.add("beta_eta", theta.coefficients.size, _blk_treatment(cache))
        params["beta_eta"] = theta.coefficients
        stack.add("iota", iota.coefficients.size, _blk_iota(cache))
        params["iota"] = iota.coefficients


def _want_variance(cache, report, uses_propensity=True):
    if not cache.cfg.variance:
        return False
    if uses_propensity and cache.cfg.propensity_candidates:
        report.warnings.append("sandwich SE unavailable with ensemble propensity; use the bootstrap")
        return False
    return True


def _finish(cache, report, stack, params):
    """Attach a sandwich SE for ``delta`` (the last block of ``stack``)."""
    params["delta"] = np.array([report.delta_hat])
    system = stack.system(report.estimator_tag)
    theta = stack.join(params)
    try:
        cov = sandwich_variance(system, cache.ds, theta)
    except SingularMatrixError as exc:
        report.warnings.append(str(exc))
        return report
    idx = stack.index("delta")
    report.se = float(np.sqrt(max(cov[idx, idx][0, 0], 0.0)))
    report.extra["stacked_theta"] = theta
    report.extra["stacked_labels"] = [b.name for b in stack.blocks]
    return report


def _delta_block(fn):
    return lambda ds, p: fn(ds, p) - p["delta"][0]


# -- paper estimators -------------------------------------------------------

def _require_binary(ds, tag):
    if not ds.binary_outcome:
        raise DataError(f"{tag} requires a binary outcome")


def estimate_b_reg(ds, config=None, *, cache=None) -> EstimateReport:
    """Bounded regression estimator: mean of ``tanh(alpha_2mle' x)``."""
    cache = cache or FitCache(ds, config)
    _require_binary(ds, "b-reg")
    alpha = cache.outcome.part("alpha")
    vals = np.tanh(cache.x("delta") @ alpha)
    est = float(ds.mean(vals))
    rep = EstimateReport("b-reg", est, _bounds_flag(ds, est),
                         cache.nuisance_fits("treatment", "outcome"))
    if _want_variance(cache, rep, uses_propensity=False):
        stack, params = Stack(), {}
        stack.add("beta_eta", cache.treatment.coefficients.size, _blk_treatment(cache))
        stack.add("alpha_zeta", cache.outcome.coefficients.size, _blk_outcome(cache))
        params.update(beta_eta=cache.treatment.coefficients, alpha_zeta=cache.outcome.coefficients)
        pa = alpha.size
        stack.add("delta", 1, _delta_block(
            lambda ds_, p: np.tanh(cache.x("delta") @ p["alpha_zeta"][:pa])))
        _finish(cache, rep, stack, params)
    return rep


def _ipw_stack(cache):
    stack, params = Stack(), {}
    stack.add("gamma", cache.x("propensity").shape[1], _blk_gamma(cache))
    params["gamma"] = cache.propensity.coefficients
    stack.add("beta_ipw", cache.x("delta_d").shape[1], _blk_beta_ipw(cache))
    params["beta_ipw"] = beta_ipw(cache)
    return stack, params


def estimate_ipw(ds, config=None, *, cache=None) -> EstimateReport:
    """Inverse-probability-weighted estimator (unbounded)."""
    cache = cache or FitCache(ds, config)
    f = cache.f
    b = beta_ipw(cache)
    rd = rd_d_values(cache, b)
    rep = EstimateReport("ipw", np.nan, None, cache.nuisance_fits("propensity"))
    _check_f(rep.warnings, f)
    _check_rd(rep.warnings, rd, "delta_d(x; beta_ipw)")
    pseudo = ds.y * _signed_ipw(cache, f) / rd
    rep.delta_hat = float(ds.mean(pseudo))
    rep.in_bounds = _bounds_flag(ds, rep.delta_hat)
    rep.extra["beta_ipw"] = b
    if _want_variance(cache, rep):
        stack, params = _ipw_stack(cache)
        stack.add("delta", 1, _delta_block(lambda ds_, p: _ipw_pseudo(cache, p)))
        _finish(cache, rep, stack, params)
    return rep


def estimate_b_ipw(ds, config=None, *, cache=None) -> EstimateReport:
    """IPW projected onto a bounded working model for the Wald estimand."""
    cache = cache or FitCache(ds, config)
    f = cache.f
    b = beta_ipw(cache)
    dim = cache.x("working").shape[1]
    blk = _blk_alpha_working(cache)
    a = cache._solve("alpha_working",
                     lambda ds_, p: blk(ds_, {"alpha_working": p["alpha_working"], "beta_ipw": b}),
                     dim, "b-ipw working model")
    est = float(ds.mean(delta_values(cache, a, "working")))
    rep = EstimateReport("b-ipw", est, _bounds_flag(ds, est), cache.nuisance_fits("propensity"))
    _check_f(rep.warnings, f)
    _check_rd(rep.warnings, rd_d_values(cache, b), "delta_d(x; beta_ipw)")
    rep.extra.update(beta_ipw=b, alpha_working=a)
    if _want_variance(cache, rep):
        stack, params = _ipw_stack(cache)
        stack.add("alpha_working", dim, blk)
        params["alpha_working"] = a
        stack.add("delta", 1, _delta_block(
            lambda ds_, p: delta_values(cache, p["alpha_working"], "working")))
        _finish(cache, rep, stack, params)
    return rep


def estimate_g(ds, config=None, *, cache=None) -> EstimateReport:
    """g-estimator: solve the instrument-weighted residual equation for alpha."""
    cache = cache or FitCache(ds, config)
    f = cache.f
    dim = cache.x("delta").shape[1]
    blk = _blk_alpha_g(cache)
    a = cache._solve("alpha_g", lambda ds_, p: blk(ds_, {"alpha_g": p["alpha_g"]}), dim,
                     "g-estimation equation")
    est = float(ds.mean(delta_values(cache, a)))
    rep = EstimateReport("g", est, _bounds_flag(ds, est), cache.nuisance_fits("propensity"))
    _check_f(rep.warnings, f)
    rep.extra["alpha_g"] = a
    if _want_variance(cache, rep):
        stack, params = Stack(), {}
        stack.add("gamma", cache.x("propensity").shape[1], _blk_gamma(cache))
        params["gamma"] = cache.propensity.coefficients
        stack.add("alpha_g", dim, blk)
        params["alpha_g"] = a
        stack.add("delta", 1, _delta_block(lambda ds_, p: delta_values(cache, p["alpha_g"])))
        _finish(cache, rep, stack, params)
    return rep


def _mr_common(cache, bounded):
    f = cache.f
    b = beta_dr(cache)
    a = alpha_dr(cache, bounded)
    rd = rd_d_values(cache, b)
    return f, b, a, rd


def _mr_fits(cache):
    if cache.ds.binary_outcome:
        return cache.nuisance_fits("propensity", "treatment", "outcome")
    return [cache.propensity, *cache.linear]


def _mr_stack(cache, bounded, a, b):
    stack, params = Stack(), {}
    _nuisance_blocks(cache, stack, params)
    stack.add("beta_dr", b.size, _blk_beta_dr(cache))
    params["beta_dr"] = b
    key = "alpha_bdr" if bounded else "alpha_dr"
    stack.add(key, a.size, _blk_alpha_dr(cache, bounded))
    params[key] = a
    return stack, params


def estimate_mr(ds, config=None, *, cache=None) -> EstimateReport:
    """Multiply robust estimator from the efficient influence function.

    Never clamped: values outside [-1, 1] are possible for binary outcomes.
    ``influence_values`` holds the per-unit summand minus the estimate.
    """
    cache = cache or FitCache(ds, config)
    f, b, a, rd = _mr_common(cache, bounded=False)
    params = {"beta_dr": b}
    summand = _mr_summand(cache, params, a)
    est = float(ds.mean(summand))
    rep = EstimateReport("mr", est, _bounds_flag(ds, est), _mr_fits(cache))
    _check_f(rep.warnings, f)
    _check_rd(rep.warnings, rd, "delta_d(x; beta_dr)")
    if np.min(np.abs(rd)) < MR_INSTABILITY:
        rep.warnings.append("delta_d(x; beta_dr) nearly 0: mr is unstable")
    rep.influence_values = summand - est
    rep.extra.update(beta_dr=b, alpha_dr=a)
    if _want_variance(cache, rep):
        stack, sp = _mr_stack(cache, False, a, b)
        stack.add("delta", 1, _delta_block(lambda ds_, p: _mr_summand(cache, p, p["alpha_dr"])))
        _finish(cache, rep, stack, sp)
    return rep


def estimate_b_mr(ds, config=None, *, cache=None) -> EstimateReport:
    """Bounded multiply robust estimator: mean of ``delta(x; alpha_dr)``.

    ``alpha_dr`` solves the doubly robust equation with the intercept slot
    of ``g`` replaced by ``1 / delta_d(x; beta_dr)``.
    """
    cache = cache or FitCache(ds, config)
    f, b, a, rd = _mr_common(cache, bounded=True)
    est = float(ds.mean(delta_values(cache, a)))
    rep = EstimateReport("b-mr", est, _bounds_flag(ds, est), _mr_fits(cache))
    _check_f(rep.warnings, f)
    _check_rd(rep.warnings, rd, "delta_d(x; beta_dr)")
    summand = _mr_summand(cache, {"beta_dr": b}, a)
    rep.influence_values = summand - est
    rep.extra.update(beta_dr=b, alpha_dr=a)
    if _want_variance(cache, rep):
        stack, sp = _mr_stack(cache, True, a, b)
        stack.add("delta", 1, _delta_block(lambda ds_, p: delta_values(cache, p["alpha_bdr"])))
        _finish(cache, rep, stack, sp)
    return rep


# -- baselines ----------------------------------------------------------------

def estimate_crude(ds, config=None, *, cache=None) -> EstimateReport:
    """Difference in weighted outcome means between treatment arms."""
    t, c = ds.d == 1, ds.d == 0
    if not (t.any() and c.any()):
        raise DegenerateDataError("crude estimate needs both treatment arms")
    est = float(ds.w[t] @ ds.y[t] / ds.w[t].sum() - ds.w[c] @ ds.y[c] / ds.w[c].sum())
    return EstimateReport("crude", est, _bounds_flag(ds, est))


def estimate_2sls(ds, config=None, *, cache=None) -> EstimateReport:
    """Two-stage least squares with a linear first stage for D given (Z, X)."""
    cfg = (cache.cfg if cache else config) or EstimatorConfig()
    xmat = ds.columns(cfg.tsls)
    require_complete(ds, cfg.tsls)
    names = list(cfg.tsls) if cfg.tsls is not None else ds.column_names
    covs = xmat[:, [j for j, nm in enumerate(names) if nm != INTERCEPT]]
    one = np.ones((ds.n, 1))
    first = np.hstack([one, ds.z[:, None], covs])
    try:
        d_hat = first @ weighted_lstsq(first, ds.d, ds.w)
        second = np.hstack([one, d_hat[:, None], covs])
        coef = weighted_lstsq(second, ds.y, ds.w)
    except SingularMatrixError as exc:
        raise SingularMatrixError(f"2SLS: {exc}", estimator="2sls") from None
    est = float(coef[1])
    return EstimateReport("2sls", est, _bounds_flag(ds, est))


def estimate_late_ett_plugin(ds, config=None, *, cache=None):
    """Plug-in LATE (ratio of averaged risk differences) and ETT.

    Uses the two-step MLE fits of the regression estimator.
    """
    cache = cache or FitCache(ds, config)
    _require_binary(ds, "late-ett")
    rd_d = rd_d_values(cache, cache.treatment.part("beta"))
    delta = np.tanh(cache.x("delta") @ cache.outcome.part("alpha"))
    denom = ds.mean(rd_d)
    if denom == 0.0:
        raise NumericalError("mean instrument-treatment risk difference is 0", estimator="late-ett")
    late = float(ds.mean(delta * rd_d) / denom)
    t = ds.d == 1
    if not t.any():
        raise DegenerateDataError("ETT needs treated units")
    ett = float(ds.w[t] @ delta[t] / ds.w[t].sum())
    return late, ett


def _late_ett_reports(ds, config=None, *, cache=None):
    cache = cache or FitCache(ds, config)
    late, ett = estimate_late_ett_plugin(ds, cache=cache)
    fits = cache.nuisance_fits("treatment", "outcome")
    return [EstimateReport("late", late, _bounds_flag(ds, late), fits),
            EstimateReport("ett", ett, _bounds_flag(ds, ett), fits)]


ESTIMATOR_FUNCS = {
    "b-reg": estimate_b_reg,
    "ipw": estimate_ipw,
    "b-ipw": estimate_b_ipw,
    "g": estimate_g,
    "mr": estimate_mr,
    "b-mr": estimate_b_mr,
    "crude": estimate_crude,
    "2sls": estimate_2sls,
}


SOLVED_EQUATIONS = {
    "b-reg": ("treatment", "outcome"),
    "ipw": ("propensity", "beta_ipw"),
    "b-ipw": ("propensity", "beta_ipw", "alpha_working"),
    "g": ("propensity", "alpha_g"),
    "mr": ("propensity", "treatment", "outcome", "beta_dr", "alpha_dr"),
    "b-mr": ("propensity", "treatment", "outcome", "beta_dr", "alpha_bdr"),
}


def estimate(ds, name, config=None, *, cache=None) -> List[EstimateReport]:
    """Run one registry estimator; ``late-ett`` yields two reports."""
    if name not in REGISTRY:
        raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(REGISTRY)}")
    cache = cache or FitCache(ds, config)
    if name == "late-ett":
        return _late_ett_reports(ds, config, cache=cache)
    try:
        rep = ESTIMATOR_FUNCS[name](ds, config, cache=cache)
    except NumericalError as exc:
        if exc.estimator is None:
            exc.estimator = name
        raise
    for key in SOLVED_EQUATIONS.get(name, ()):
        if key in cache.approximate:
            rep.converged = False
            rep.warnings.append(f"{key}: no exact root or maximiser; approximate "
                                f"solution used (residual {cache.approximate[key]:.3g})")
    if not rep.converged and rep.se is not None:
        # the sandwich is only valid at an exact root of the stacked equations
        rep.se = None
        rep.warnings.append("sandwich SE withheld: estimating equations not solved exactly")
    return [rep]


def estimate_all(ds, names=PAPER_ESTIMATORS, config=None, *, on_error="raise", warm=None):
    """Evaluate several estimators with shared nuisance fits.

    With ``on_error="record"`` a failing estimator yields a report with
    ``delta_hat = nan``, ``converged = False`` and the error message.
    Returns ``(reports, cache)``.
    """
    cache = FitCache(ds, config, warm=warm)
    reports = []
    for name in names:
        try:
            reports.extend(estimate(ds, name, cache=cache))
        except (IVError, np.linalg.LinAlgError, FloatingPointError) as exc:
            if on_error == "raise":
                raise
            tags = ["late", "ett"] if name == "late-ett" else [name]
            for tag in tags:
                reports.append(EstimateReport(tag, np.nan, None, converged=False,
                                              warnings=[f"{type(exc).__name__}: {exc}"]))
    return reports, cache
