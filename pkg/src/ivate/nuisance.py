"""Maximum-likelihood fits of the nuisance models.

* instrument propensity ``P(Z=1|x) = expit(gamma'x)``
* two-step MLE: ``(beta, eta)`` from the likelihood of D given (Z, X), then
  ``(alpha, zeta)`` from the likelihood of Y given (Z, X) with beta fixed;
  both go through the odds-product parameterization in :mod:`ivate.param`
* continuous-outcome baseline regression ``E[Y|Z=0, x]``
* the two-step ensemble propensity
"""
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, NumericalError, SingularMatrixError
from .mestimate import fd_jacobian
from .param import link_delta_deriv, p0_and_derivatives

EPS = 1e-10
GRAD_TOL = 1e-8
MAX_ITER = 200
ENSEMBLE_RIDGE = 1e-8
PROPENSITY_CLAMP = 1e-3


@dataclass
class NuisanceFit:
    coefficients: np.ndarray
    model_tag: str
    converged: bool
    iterations: int
    final_gradient_norm: float
    log_likelihood: Optional[float] = None
    solver: str = "newton"
    blocks: Dict[str, slice] = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)

    def part(self, name):
        return self.coefficients[self.blocks[name]]


# -- generic maximiser ------------------------------------------------------

def maximize(loglik, grad, dim, *, init=None, tol=GRAD_TOL, max_iter=MAX_ITER,
             info=None, tag="likelihood", approximate=False):
    """Damped Fisher scoring / Newton ascent on a mean log-likelihood.

    With an expected-information function ``info`` the ascent starts with
    Fisher scoring and switches to Newton (central finite-difference Hessian
    of the analytic gradient) once scoring stops cutting the score by 4x per
    step. If the Hessian is not negative definite, ``info`` is used instead. Returns ``(theta, iterations, grad_norm, loglik)``.
    Ascent stops once a coefficient exceeds 1e3 in magnitude (supremum not
    attained); that iterate is returned when ``approximate`` is set and
    otherwise raises ConvergenceError.
    """
    theta = np.zeros(dim) if init is None else np.array(init, dtype=float)
    scoring = info is not None
    ll = loglik(theta)
    g = grad(theta)
    gnorm = float(np.max(np.abs(g)))
    it = 0
    polish = 0
    while it < max_iter:
        if gnorm < tol:
            # a couple of extra Newton steps push the score to round-off
            if polish >= 2:
                break
            polish += 1
        it += 1
        accepted = False
        for kind in (("scoring", "newton") if scoring else ("newton",)):
            step = _ascent_step(kind, grad, info, theta, g)
            if step is None:
                continue
            t = 1.0
            for _ in range(40):
                cand = theta + t * step
                ll_new = loglik(cand)
                if np.isfinite(ll_new) and ll_new >= ll - 1e-14 * abs(ll):
                    g_new = grad(cand)
                    if np.all(np.isfinite(g_new)) and (ll_new > ll or np.max(np.abs(g_new)) < gnorm):
                        accepted = True
                        break
                t *= 0.5
            if accepted:
                # scoring that stops making fast progress hands over to Newton
                if kind == "scoring" and np.max(np.abs(g_new)) > 0.25 * gnorm:
                    scoring = False
                break
        if not accepted:
            break
        theta, ll, g = cand, ll_new, g_new
        gnorm = float(np.max(np.abs(g)))
        if np.max(np.abs(theta)) > 1e3:
            break
    if not np.isfinite(ll):
        raise NumericalError(f"{tag}: log-likelihood is not finite", nuisance=tag)
    if gnorm >= tol and not approximate:
        raise ConvergenceError(f"{tag}: no convergence after {it} iterations "
                               f"(|score| = {gnorm:.3g})", best=theta,
                               residual_norm=gnorm, iterations=it, nuisance=tag)
    return theta, it, gnorm, ll


def _ascent_step(kind, grad, info, theta, g):
    """Fisher-scoring or Newton direction; None if it cannot be formed."""
    step = None
    if kind == "scoring":
        try:
            step = np.linalg.solve(info(theta), g)
        except np.linalg.LinAlgError:
            return None
    else:
        hess = fd_jacobian(grad, theta)
        hess = 0.5 * (hess + hess.T)
        try:
            chol = np.linalg.cholesky(-hess)
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, g))
        except np.linalg.LinAlgError:
            if info is not None:
                try:
                    step = np.linalg.solve(info(theta), g)
                except np.linalg.LinAlgError:
                    step = None
        if step is None or not np.all(np.isfinite(step)):
            step = g / max(1.0, np.max(np.abs(g)))
    return step if np.all(np.isfinite(step)) else None


def _bernoulli_terms(ds, outcome, p):
    pc = np.clip(p, EPS, 1.0 - EPS)
    ll = ds.w @ (outcome * np.log(pc) + (1.0 - outcome) * np.log1p(-pc)) / ds.n
    # d loglik / d p, per unit, already weighted and scaled by 1/n
    dldp = ds.w * (outcome - pc) / (pc * (1.0 - pc)) / ds.n
    info_w = ds.w / (pc * (1.0 - pc)) / ds.n
    return ll, dldp, info_w


# -- instrument propensity --------------------------------------------------

SEPARATION_ETA = 30.0


def _check_design(xmat, label):
    if xmat.shape[1] == 0:
        raise SingularMatrixError(f"{label}: empty design")
    if np.linalg.matrix_rank(xmat) < xmat.shape[1]:
        raise SingularMatrixError(f"{label}: design matrix is rank deficient", nuisance=label)


class Propensity:
    """Evaluator for ``f(z|x)`` from a fitted logistic model."""

    def __init__(self, gamma, cols):
        self.gamma = np.asarray(gamma, dtype=float)
        self.cols = cols

    def prob1(self, ds):
        return expit(ds.columns(self.cols) @ self.gamma)

    def density(self, ds, z=None):
        z = ds.z if z is None else z
        pi = self.prob1(ds)
        return np.where(z == 1, pi, 1.0 - pi)


def propensity_loglik_parts(ds, xmat):
    def loglik(g):
        return _bernoulli_terms(ds, ds.z, expit(xmat @ g))[0]

    def grad(g):
        pi = expit(xmat @ g)
        return xmat.T @ (ds.w * (ds.z - pi)) / ds.n

    def info(g):
        pi = expit(xmat @ g)
        return (xmat * (ds.w * pi * (1 - pi))[:, None]).T @ xmat / ds.n

    return loglik, grad, info


def fit_propensity(ds, cols=None, *, init=None, approximate=False) -> NuisanceFit:
    """Logistic-regression MLE of Z on the design ``ds.columns(cols)``."""
    xmat = ds.columns(cols)
    _check_design(xmat, "propensity")
    loglik, grad, info = propensity_loglik_parts(ds, xmat)
    theta, it, gn, ll = maximize(loglik, grad, xmat.shape[1], init=init, info=info,
                                 tag="propensity", approximate=approximate)
    # a vanishing score with a huge linear predictor means separation: the
    # maximum sits at infinity and positivity fails for some units
    separated = np.max(np.abs(xmat @ theta)) > SEPARATION_ETA
    if separated and not approximate:
        raise ConvergenceError("propensity: instrument is (quasi-)separated by the covariates; "
                               "fitted P(Z=1|x) reaches 0 or 1", best=theta,
                               residual_norm=gn, iterations=it, nuisance="propensity")
    fit = NuisanceFit(theta, "gamma", gn < GRAD_TOL and not separated, it, gn, ll, "newton",
                      {"gamma": slice(0, theta.size)})
    fit.extra["evaluator"] = Propensity(theta, cols)
    fit.extra["cols"] = cols
    return fit


# -- two-step MLE -----------------------------------------------------------

def treatment_parts(ds, xb, xe, link="tanh"):
    """Log-likelihood and analytic score of D | Z, X in (beta, eta)."""
    pb = xb.shape[1]

    def probs(theta):
        rd, drd = link_delta_deriv(link, xb @ theta[:pb])
        op = np.exp(xe @ theta[pb:])
        p0, dp0_rd, dp0_lop = p0_and_derivatives(rd, op)
        return rd, drd, p0, dp0_rd, dp0_lop

    def loglik(theta):
        rd, _, p0, _, _ = probs(theta)
        return _bernoulli_terms(ds, ds.d, p0 + ds.z * rd)[0]

    def grad(theta):
        rd, drd, p0, dp0_rd, dp0_lop = probs(theta)
        _, s, _ = _bernoulli_terms(ds, ds.d, p0 + ds.z * rd)
        return np.concatenate([xb.T @ (s * (dp0_rd + ds.z) * drd), xe.T @ (s * dp0_lop)])

    def jac(theta):
        rd, drd, p0, dp0_rd, dp0_lop = probs(theta)
        return np.hstack([xb * ((dp0_rd + ds.z) * drd)[:, None], xe * dp0_lop[:, None]]), p0 + ds.z * rd

    def info(theta):
        j, p = jac(theta)
        _, _, iw = _bernoulli_terms(ds, ds.d, p)
        return (j * iw[:, None]).T @ j

    def unit_scores(theta):
        rd, drd, p0, dp0_rd, dp0_lop = probs(theta)
        p = np.clip(p0 + ds.z * rd, EPS, 1 - EPS)
        s = (ds.d - p) / (p * (1 - p))
        return np.hstack([xb * (s * (dp0_rd + ds.z) * drd)[:, None], xe * (s * dp0_lop)[:, None]])

    return loglik, grad, info, unit_scores


def outcome_parts(ds, xa, xz, rd_d):
    """Log-likelihood and analytic score of Y | Z, X in (alpha, zeta).

    ``rd_d`` is the fitted instrument-treatment risk difference per unit.
    """
    pa = xa.shape[1]

    def probs(theta):
        delta = np.tanh(xa @ theta[:pa])
        rd_y = delta * rd_d
        op = np.exp(xz @ theta[pa:])
        p0, dp0_rd, dp0_lop = p0_and_derivatives(rd_y, op)
        return delta, rd_y, p0, dp0_rd, dp0_lop

    def loglik(theta):
        _, rd_y, p0, _, _ = probs(theta)
        return _bernoulli_terms(ds, ds.y, p0 + ds.z * rd_y)[0]

    def grad(theta):
        delta, rd_y, p0, dp0_rd, dp0_lop = probs(theta)
        _, s, _ = _bernoulli_terms(ds, ds.y, p0 + ds.z * rd_y)
        da = (dp0_rd + ds.z) * rd_d * (1.0 - delta * delta)
        return np.concatenate([xa.T @ (s * da), xz.T @ (s * dp0_lop)])

    def info(theta):
        delta, rd_y, p0, dp0_rd, dp0_lop = probs(theta)
        _, _, iw = _bernoulli_terms(ds, ds.y, p0 + ds.z * rd_y)
        da = (dp0_rd + ds.z) * rd_d * (1.0 - delta * delta)
        j = np.hstack([xa * da[:, None], xz * dp0_lop[:, None]])
        return (j * iw[:, None]).T @ j

    def unit_scores(theta):
        delta, rd_y, p0, dp0_rd, dp0_lop = probs(theta)
        p = np.clip(p0 + ds.z * rd_y, EPS, 1 - EPS)
        s = (ds.y - p) / (p * (1 - p))
        da = (dp0_rd + ds.z) * rd_d * (1.0 - delta * delta)
        return np.hstack([xa * (s * da)[:, None], xz * (s * dp0_lop)[:, None]])

    return loglik, grad, info, unit_scores


def fit_treatment_2mle(ds, delta_d_cols=None, op_d_cols=None, *, link="tanh",
                       init=None, approximate=False) -> NuisanceFit:
    """First step of the two-step MLE: ``(beta, eta)`` from D | Z, X."""
    xb, xe = ds.columns(delta_d_cols), ds.columns(op_d_cols)
    _check_design(xb, "delta_d design")
    _check_design(xe, "op_d design")
    loglik, grad, info, _ = treatment_parts(ds, xb, xe, link)
    theta, it, gn, ll = maximize(loglik, grad, xb.shape[1] + xe.shape[1], init=init,
                                 info=info, tag="treatment 2mle", approximate=approximate)
    pb = xb.shape[1]
    fit = NuisanceFit(theta, "beta,eta", gn < GRAD_TOL, it, gn, ll, "newton",
                      {"beta": slice(0, pb), "eta": slice(pb, theta.size)})
    fit.extra.update(link=link, delta_d_cols=delta_d_cols, op_d_cols=op_d_cols)
    return fit


def fit_outcome_2mle(ds, beta_hat, delta_d_cols=None, delta_cols=None, op_y_cols=None, *,
                     link="tanh", init=None, approximate=False) -> NuisanceFit:
    """Second step: ``(alpha, zeta)`` from Y | Z, X with beta held at ``beta_hat``."""
    if not ds.binary_outcome:
        raise NumericalError("two-step outcome MLE needs a binary outcome", nuisance="alpha,zeta")
    rd_d = link_delta_deriv(link, ds.columns(delta_d_cols) @ beta_hat)[0]
    xa, xz = ds.columns(delta_cols), ds.columns(op_y_cols)
    _check_design(xa, "delta design")
    _check_design(xz, "op_y design")
    loglik, grad, info, _ = outcome_parts(ds, xa, xz, rd_d)
    theta, it, gn, ll = maximize(loglik, grad, xa.shape[1] + xz.shape[1], init=init,
                                 info=info, tag="outcome 2mle", approximate=approximate)
    pa = xa.shape[1]
    fit = NuisanceFit(theta, "alpha,zeta", gn < GRAD_TOL, it, gn, ll, "newton",
                      {"alpha": slice(0, pa), "zeta": slice(pa, theta.size)})
    fit.extra.update(beta=np.asarray(beta_hat, float), link=link, delta_cols=delta_cols,
                     op_y_cols=op_y_cols, delta_d_cols=delta_d_cols)
    return fit


def baseline_treatment(ds, treat_fit: NuisanceFit):
    """``p0^D(x; beta, eta)`` for every unit, plus the fitted ``delta^D(x)``."""
    link = treat_fit.extra["link"]
    rd = link_delta_deriv(link, ds.columns(treat_fit.extra["delta_d_cols"]) @ treat_fit.part("beta"))[0]
    op = np.exp(ds.columns(treat_fit.extra["op_d_cols"]) @ treat_fit.part("eta"))
    return p0_and_derivatives(rd, op)[0], rd


def baseline_outcome(ds, out_fit: NuisanceFit):
    """``p0^Y(x; alpha, beta, zeta)`` for every unit, plus ``delta(x; alpha)``."""
    link = out_fit.extra["link"]
    rd_d = link_delta_deriv(link, ds.columns(out_fit.extra["delta_d_cols"]) @ out_fit.extra["beta"])[0]
    delta = np.tanh(ds.columns(out_fit.extra["delta_cols"]) @ out_fit.part("alpha"))
    op = np.exp(ds.columns(out_fit.extra["op_y_cols"]) @ out_fit.part("zeta"))
    return p0_and_derivatives(delta * rd_d, op)[0], delta


# -- continuous outcome -----------------------------------------------------

def weighted_lstsq(xmat, y, w):
    sw = np.sqrt(w)
    a = xmat * sw[:, None]
    if np.linalg.matrix_rank(a) < xmat.shape[1]:
        raise SingularMatrixError("rank-deficient least-squares design")
    coef, *_ = np.linalg.lstsq(a, y * sw, rcond=None)
    return coef


def fit_linear_nuisances(ds, delta_d_cols=None, op_d_cols=None, p0y_cols=None, *, link="tanh"):
    """Nuisances for a continuous outcome.

    ``theta`` is the treatment two-step MLE (D is always binary) and ``iota``
    the weighted least-squares fit of Y within the ``Z = 0`` arm, which
    estimates ``p0^Y(x) = E[Y | Z=0, x]`` directly.
    """
    theta_fit = fit_treatment_2mle(ds, delta_d_cols, op_d_cols, link=link)
    theta_fit.model_tag = "theta"
    arm = ds.z == 0
    xmat = ds.columns(p0y_cols)
    iota = weighted_lstsq(xmat[arm], ds.y[arm], ds.w[arm])
    resid = xmat[arm].T @ (ds.w[arm] * (ds.y[arm] - xmat[arm] @ iota)) / ds.n
    iota_fit = NuisanceFit(iota, "iota", True, 1, float(np.max(np.abs(resid))), None,
                           "least squares", {"iota": slice(0, iota.size)})
    iota_fit.extra["cols"] = p0y_cols
    return theta_fit, iota_fit


# -- ensemble propensity ----------------------------------------------------

class EnsemblePropensity:
    """``P(Z=1|x) = sum_j a_j pi_j(x)``, clamped into ``[eps, 1 - eps]``."""

    def __init__(self, members: List[Propensity], weights, eps=PROPENSITY_CLAMP):
        self.members = members
        self.weights = np.asarray(weights, dtype=float)
        self.eps = eps

    def prob1(self, ds):
        cols = np.column_stack([m.prob1(ds) for m in self.members])
        return np.clip(cols @ self.weights, self.eps, 1.0 - self.eps)

    def density(self, ds, z=None):
        z = ds.z if z is None else z
        pi = self.prob1(ds)
        return np.where(z == 1, pi, 1.0 - pi)


def fit_propensity_ensemble(ds, candidates, *, eps=PROPENSITY_CLAMP) -> NuisanceFit:
    """Mixture of logistic propensity models.

    Each candidate design is fitted by :func:`fit_propensity`; the mixture
    weights come from a weighted no-intercept regression of Z on the fitted
    probabilities, with a small ridge term guarding collinear candidates.
    """
    if len(candidates) == 0:
        raise ValueError("need at least one candidate propensity design")
    fits = [fit_propensity(ds, cols) for cols in candidates]
    members = [f.extra["evaluator"] for f in fits]
    probs = np.column_stack([m.prob1(ds) for m in members])
    gram = (probs * ds.w[:, None]).T @ probs / ds.n
    rhs = probs.T @ (ds.w * ds.z) / ds.n
    collinear = np.linalg.cond(gram) > 1e10
    ridge = ENSEMBLE_RIDGE * np.eye(len(fits))
    weights = np.linalg.solve(gram + ridge, rhs)
    if collinear:
        warnings.warn("ensemble propensity candidates are (nearly) collinear; "
                      "weights are ridge-regularised", RuntimeWarning)
    resid = rhs - gram @ weights
    fit = NuisanceFit(weights, "ensemble", True, 1, float(np.max(np.abs(resid))), None,
                      "least squares", {"weights": slice(0, len(fits))})
    fit.extra.update(evaluator=EnsemblePropensity(members, weights, eps), members=fits,
                     collinear=collinear)
    return fit
