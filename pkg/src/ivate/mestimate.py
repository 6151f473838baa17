"""Stacked estimating equations: root finding and sandwich variances.

An :class:`EstimatingSystem` maps ``(dataset, theta)`` to an ``(n, q)`` array
of per-unit contributions ``m(O_i; theta)``; the estimating equation is the
weighted empirical mean ``P_n m = w @ m / n = 0``.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np
from scipy.optimize import least_squares

from .errors import ConvergenceError, SingularMatrixError

TOL = 1e-9
MAX_ITER = 500
RESTART_SHIFT = 0.1
LM_START, LM_MAX = 1e-8, 1e2
LSQ_MAX_NFEV = 400
# Newton counts as stalled when STALL_WINDOW iterations fail to halve the residual
STALL_WINDOW, STALL_FACTOR = 10, 0.5


@dataclass
class EstimatingSystem:
    residual_fn: Callable
    dim: int
    label: str = ""

    def contributions(self, ds, theta):
        m = np.asarray(self.residual_fn(ds, theta), dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        return m

    def mean(self, ds, theta):
        return ds.w @ self.contributions(ds, theta) / ds.n


@dataclass
class SolveResult:
    theta_hat: np.ndarray
    residual_norm: float
    jacobian: np.ndarray
    converged: bool
    iterations: int


def fd_jacobian(fn, theta, rel_step=1e-6):
    """Central-difference Jacobian of a vector function of theta."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = max(1e-6, rel_step * abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        cols.append((np.asarray(fn(tp)) - np.asarray(fn(tm))) / (2.0 * h))
    return np.column_stack(cols)


def _newton_step(jac, resid):
    """Solve ``jac @ step = -resid``, escalating Levenberg damping if singular."""
    try:
        if np.linalg.cond(jac) < 1e12:
            return np.linalg.solve(jac, -resid)
    except np.linalg.LinAlgError:
        pass
    lam = LM_START
    jtj, jtr = jac.T @ jac, jac.T @ resid
    scale = max(1.0, float(np.max(np.abs(np.diag(jtj)))))
    while lam <= LM_MAX:
        try:
            mat = jtj + lam * scale * np.eye(len(resid))
            if np.linalg.cond(mat) < 1e14:
                return np.linalg.solve(mat, -jtr)
        except np.linalg.LinAlgError:
            pass
        lam *= 10.0
    raise SingularMatrixError("Jacobian singular even after Levenberg damping")


def _newton(fn, x0, tol, max_iter):
    x = np.asarray(x0, dtype=float).copy()
    r = fn(x)
    norm = float(np.max(np.abs(r))) if np.all(np.isfinite(r)) else np.inf
    best = (norm, x.copy())
    jac = np.eye(x.size)
    it = 0
    history = [norm]
    while it < max_iter and norm >= tol:
        if len(history) > STALL_WINDOW and norm > STALL_FACTOR * history[-STALL_WINDOW - 1]:
            break
        it += 1
        jac = fd_jacobian(fn, x)
        if not np.all(np.isfinite(jac)):
            break
        step = _newton_step(jac, r)
        t = 1.0
        improved = False
        for _ in range(30):
            xn = x + t * step
            rn = fn(xn)
            nn = float(np.max(np.abs(rn))) if np.all(np.isfinite(rn)) else np.inf
            if nn < norm:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        x, r, norm = xn, rn, nn
        history.append(norm)
        if norm < best[0]:
            best = (norm, x.copy())
    return x, norm, jac, it, best


def _least_squares(fn, init, tol):
    """Trust-region least squares on the same residual; used when Newton stalls."""
    try:
        res = least_squares(fn, init, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12,
                            max_nfev=LSQ_MAX_NFEV)
    except (ValueError, np.linalg.LinAlgError):
        return None
    r = fn(res.x)
    if not np.all(np.isfinite(r)):
        return None
    return res.x, float(np.max(np.abs(r))), res.nfev


def solve(system: EstimatingSystem, ds, init, *, tol=TOL, max_iter=MAX_ITER,
          approximate=False) -> SolveResult:
    """Find ``theta`` with ``||P_n m(O; theta)||_inf < tol``.

    Damped Newton with a central finite-difference Jacobian and a halving
    line search on the sup-norm residual. On a stall the search restarts once
    from ``init + 0.1``, then falls back to trust-region least squares.
    If no root is found, raises ConvergenceError carrying the best iterate,
    or with ``approximate=True`` returns the least-squares minimiser flagged
    ``converged=False``.
    """
    init = np.atleast_1d(np.asarray(init, dtype=float))
    if init.size != system.dim:
        raise ValueError(f"init has size {init.size}, system dimension is {system.dim}")
    if not np.all(np.isfinite(init)):
        raise ValueError("init must be finite")

    def fn(theta):
        return system.mean(ds, theta)

    x, norm, jac, it, best = _newton(fn, init, tol, max_iter)
    total = it
    if norm >= tol:
        x2, norm2, jac2, it2, best2 = _newton(fn, init + RESTART_SHIFT, tol, max_iter)
        total += it2
        if norm2 < norm:
            x, norm, jac = x2, norm2, jac2
        if best2[0] < best[0]:
            best = best2
    if norm < tol:
        return SolveResult(x, norm, jac, True, total)
    ls = _least_squares(fn, init, tol)
    if ls is not None:
        total += ls[2]
        if ls[1] < tol:
            # polish so the returned root meets the Newton tolerance exactly
            xp, normp, jacp, itp, _ = _newton(fn, ls[0], tol, 20)
            if normp < tol:
                return SolveResult(xp, normp, jacp, True, total + itp)
        if ls[1] < best[0]:
            best = (ls[1], ls[0])
    if approximate:
        return SolveResult(best[1], best[0], fd_jacobian(fn, best[1]), False, total)
    raise ConvergenceError(
        f"{system.label or 'estimating equation'} did not converge "
        f"(residual {best[0]:.3g})",
        best=best[1], residual_norm=best[0], iterations=total)


# -- stacking ---------------------------------------------------------------

@dataclass
class Block:
    """One component of a stacked system.

    ``fn(ds, params)`` receives a dict of *all* parameter vectors in the
    stack, keyed by block name, and returns ``(n, dim)`` contributions.
    """
    name: str
    dim: int
    fn: Callable


@dataclass
class Stack:
    blocks: List[Block] = field(default_factory=list)

    def add(self, name, dim, fn):
        self.blocks.append(Block(name, dim, fn))
        return self

    @property
    def dim(self):
        return sum(b.dim for b in self.blocks)

    def split(self, theta):
        out, k = {}, 0
        for b in self.blocks:
            out[b.name] = np.asarray(theta[k:k + b.dim])
            k += b.dim
        return out

    def join(self, params):
        return np.concatenate([np.atleast_1d(params[b.name]) for b in self.blocks])

    def index(self, name):
        k = 0
        for b in self.blocks:
            if b.name == name:
                return slice(k, k + b.dim)
            k += b.dim
        raise KeyError(name)

    def system(self, label="stacked"):
        def residual(ds, theta):
            params = self.split(theta)
            parts = []
            for b in self.blocks:
                m = np.asarray(b.fn(ds, params), dtype=float)
                parts.append(m[:, None] if m.ndim == 1 else m)
            return np.hstack(parts)
        return EstimatingSystem(residual, self.dim, label)


def sandwich_variance(stacked: EstimatingSystem, ds, theta_hat) -> np.ndarray:
    """``A^{-1} B A^{-T} / n`` with ``A = P_n dm/dtheta`` and ``B = P_n m m^T``.

    The bread uses a finite-difference Jacobian; the result is symmetrised.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    a = fd_jacobian(lambda t: stacked.mean(ds, t), theta_hat)
    m = stacked.contributions(ds, theta_hat)
    b = (m * ds.w[:, None]).T @ m / ds.n
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > 1e14:
        raise SingularMatrixError("sandwich bread is singular; use the bootstrap instead")
    a_inv = np.linalg.inv(a)
    cov = a_inv @ b @ a_inv.T / ds.n
    return 0.5 * (cov + cov.T)
