"""Variation-independent parameterization of the binary IV likelihood.

Two risk differences and two odds products are mapped to the four cell
probabilities ``P(D=1|Z=z, x)`` and ``P(Y=1|Z=z, x)`` and back.

For one arm pair with risk difference ``rd = p1 - p0`` and odds product
``op = p1 p0 / ((1 - p1)(1 - p0))``, ``p0`` is the root in
``(max(0, -rd), min(1, 1 - rd))`` of

    (op - 1) p0^2 - (op (2 - rd) + rd) p0 + op (1 - rd) = 0.

The textbook root ``(-b - sqrt(disc)) / (2a)`` loses all precision as
``op -> 1``; we evaluate the algebraically identical rationalised form
``2c / (-b + sqrt(disc))`` whenever ``-b > 0``, which is exact at
``op = 1`` where it reduces to ``(1 - rd) / 2``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DomainError

# discriminant is non-negative on the domain; tolerate fp noise below zero
_DISC_FLOOR = -1e-12


@dataclass(frozen=True)
class WaldParams:
    """Conditional Wald estimand plus nuisance block at one or many x.

    Fields may be floats or equal-length arrays.
    """
    delta: object
    delta_d: object
    op_d: object
    op_y: object

    @property
    def delta_y(self):
        return np.multiply(self.delta, self.delta_d)


@dataclass(frozen=True)
class CellProbs:
    p0_d: object
    p1_d: object
    p0_y: object
    p1_y: object


def _p0_root(rd, op):
    a = op - 1.0
    nb = op * (2.0 - rd) + rd          # -b
    c = op * (1.0 - rd)
    disc = nb * nb - 4.0 * a * c
    if np.any(disc < _DISC_FLOOR):
        raise DomainError("negative discriminant in odds-product map")
    root = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        stable = 2.0 * c / (nb + root)
        # nb <= 0 only when op < 1/3, so a is bounded away from zero there
        textbook = (nb - root) / (2.0 * a)
    return np.where(nb > 0.0, stable, textbook)


def p0_from_rd_op(rd, op):
    """Baseline probability ``p0`` given risk difference and odds product.

    Vectorised; returns a float for scalar input.
    """
    rd = np.asarray(rd, dtype=float)
    op = np.asarray(op, dtype=float)
    out = _p0_root(rd, op)
    # keep strictly inside the valid interval against last-ulp drift
    lo = np.maximum(0.0, -rd)
    hi = np.minimum(1.0, 1.0 - rd)
    out = np.clip(out, lo, hi)
    return out if out.ndim else float(out)


def p0_textbook(rd, op):
    """Literal closed form with the ``1/(2(op-1))`` prefactor (undefined at op=1)."""
    rd = np.asarray(rd, dtype=float)
    op = np.asarray(op, dtype=float)
    disc = (op * (rd - 2.0) - rd) ** 2 + 4.0 * op * (1.0 - rd) * (1.0 - op)
    return (op * (2.0 - rd) + rd - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * (op - 1.0))


def p0_and_derivatives(rd, op):
    """Return ``p0`` and its partials w.r.t. ``rd`` and ``log(op)``.

    From implicit differentiation of ``p0 p1 - op (1-p0)(1-p1) = 0``.
    """
    p0 = np.asarray(p0_from_rd_op(rd, op), dtype=float)
    p1 = p0 + rd
    denom = p0 + p1 + op * (2.0 - p0 - p1)
    d_rd = -(p0 + op * (1.0 - p0)) / denom
    d_logop = p0 * p1 / denom
    return p0, d_rd, d_logop


def _check_open(name, value, lo, hi):
    v = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v <= lo) or np.any(v >= hi):
        raise DomainError(f"{name} outside ({lo}, {hi})")


def map_forward(wp: WaldParams) -> CellProbs:
    """(delta, delta_d, op_d, op_y) -> (p0_d, p1_d, p0_y, p1_y)."""
    _check_open("delta", wp.delta, -1.0, 1.0)
    _check_open("delta_d", wp.delta_d, -1.0, 1.0)
    _check_open("op_d", wp.op_d, 0.0, np.inf)
    _check_open("op_y", wp.op_y, 0.0, np.inf)
    rd_y = wp.delta_y
    p0_d = p0_from_rd_op(wp.delta_d, wp.op_d)
    p0_y = p0_from_rd_op(rd_y, wp.op_y)
    return CellProbs(p0_d, p0_d + np.asarray(wp.delta_d) * 1.0,
                     p0_y, p0_y + rd_y * 1.0)


def _odds_product(p0, p1):
    return p1 * p0 / ((1.0 - p1) * (1.0 - p0))


def map_inverse(cp: CellProbs) -> WaldParams:
    """(p0_d, p1_d, p0_y, p1_y) -> (delta, delta_d, op_d, op_y).

    Raises DomainError when ``p1_d == p0_d`` (no instrument relevance).
    """
    for name in ("p0_d", "p1_d", "p0_y", "p1_y"):
        _check_open(name, getattr(cp, name), 0.0, 1.0)
    p0_d, p1_d = np.asarray(cp.p0_d, float), np.asarray(cp.p1_d, float)
    p0_y, p1_y = np.asarray(cp.p0_y, float), np.asarray(cp.p1_y, float)
    rd_d = p1_d - p0_d
    if np.any(rd_d == 0.0):
        raise DomainError("p1_d == p0_d: Wald ratio has zero denominator")
    rd_y = p1_y - p0_y
    out = WaldParams(rd_y / rd_d, rd_d, _odds_product(p0_d, p1_d), _odds_product(p0_y, p1_y))
    if rd_d.ndim == 0:
        out = WaldParams(*(float(v) for v in (out.delta, out.delta_d, out.op_d, out.op_y)))
    return out


# -- links -----------------------------------------------------------------

DELTA_LINKS = ("tanh", "expit")


def link_delta(kind, eta):
    """Risk-difference link: tanh onto (-1, 1) or expit onto (0, 1)."""
    if kind == "tanh":
        return np.tanh(eta)
    if kind == "expit":
        return expit(eta)
    raise ValueError(f"unknown link {kind!r}; expected one of {DELTA_LINKS}")


def link_delta_deriv(kind, eta):
    """d link / d eta, returned together with the link value."""
    if kind == "tanh":
        t = np.tanh(eta)
        return t, 1.0 - t * t
    if kind == "expit":
        e = expit(eta)
        return e, e * (1.0 - e)
    raise ValueError(f"unknown link {kind!r}; expected one of {DELTA_LINKS}")


def link_op(eta):
    return np.exp(eta)
