"""Falsification screens for the instrumental-variable model.

The instrumental inequalities
``P(Y=y, D=d | Z=1, x) + P(Y=1-y, D=d | Z=0, x) <= 1`` must hold in every
covariate stratum; a left-hand side above one (beyond sampling noise)
signals that the instrument is invalid there.
"""
import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from .data import Dataset
from .errors import DataError

CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))   # (y, d)


@dataclass
class StratumRecord:
    stratum: str
    lhs: dict            # (y, d) -> left-hand side
    tol: dict            # (y, d) -> flagging tolerance
    max_slack: float     # max over cells of lhs - 1
    violation: bool
    weight: float
    n: int


@dataclass
class IvInequalityReport:
    strata: List[StratumRecord]
    skipped: List[str] = field(default_factory=list)

    @property
    def violation(self):
        return any(s.violation for s in self.strata)

    def to_rows(self):
        rows = []
        for s in self.strata:
            for y, d in CELLS:
                rows.append({"stratum": s.stratum, "y": y, "d": d, "lhs": s.lhs[(y, d)],
                             "tol": s.tol[(y, d)], "violation": int(s.lhs[(y, d)] > 1 + s.tol[(y, d)]),
                             "weight": s.weight, "n": s.n})
        return rows

    def format(self):
        lines = [f"{'stratum':<24}{'n':>7}{'max LHS':>10}{'max slack':>11}  status"]
        for s in self.strata:
            lines.append(f"{s.stratum:<24}{s.n:>7d}{max(s.lhs.values()):>10.4f}"
                         f"{s.max_slack:>11.4f}  {'VIOLATION' if s.violation else 'ok'}")
        for name in self.skipped:
            lines.append(f"{name:<24}  skipped: an instrument arm is empty")
        lines.append(f"overall: {'VIOLATION' if self.violation else 'no violation'}")
        return "\n".join(lines)

    def write_csv(self, path):
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["stratum", "y", "d", "lhs", "tol", "violation",
                                               "weight", "n"], lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})


def _stratum_labels(ds: Dataset, stratification, bins):
    if stratification is None or (isinstance(stratification, str) and stratification == "none"):
        return np.array(["all"] * ds.n, dtype=object)
    if isinstance(stratification, np.ndarray) or (
            isinstance(stratification, Sequence) and len(stratification) == ds.n
            and not isinstance(stratification[0], str)):
        score = np.asarray(stratification, dtype=float)
        if score.shape != (ds.n,):
            raise ValueError("score must have one value per unit")
        return _quantile_bins(score, bins)
    cols = [stratification] if isinstance(stratification, str) else list(stratification)
    if bins:
        if len(cols) != 1:
            raise ValueError("quantile binning takes exactly one score column")
        return _quantile_bins(ds.columns(cols)[:, 0], bins)
    vals = ds.columns(cols)
    return np.array(["|".join(f"{c}={v:g}" for c, v in zip(cols, row)) for row in vals], dtype=object)


def _quantile_bins(score, bins):
    bins = int(bins or 4)
    edges = np.quantile(score, np.linspace(0, 1, bins + 1)[1:-1])
    which = np.searchsorted(edges, score, side="right")
    return np.array([f"q{k + 1}/{bins}" for k in which], dtype=object)


def test_iv_inequalities(ds: Dataset, stratification: Union[None, str, Sequence[str], np.ndarray] = None,
                         *, bins: Optional[int] = None, tol: Optional[float] = None) -> IvInequalityReport:
    """Screen the instrumental inequalities overall or within strata.

    ``stratification`` is ``None`` (marginal), covariate column name(s)
    (one stratum per distinct value combination), or with ``bins`` a
    single column or per-unit score cut at its quantiles. By default a cell
    is flagged when its left-hand side exceeds one by more than two binomial
    standard errors; pass ``tol`` for a fixed margin.
    """
    if not ds.binary_outcome:
        raise DataError("the instrumental inequalities need a binary outcome")
    labels = _stratum_labels(ds, stratification, bins)
    records, skipped = [], []
    total_w = ds.w.sum()
    for lab in sorted(set(labels)):
        m = labels == lab
        z1, z0 = m & (ds.z == 1), m & (ds.z == 0)
        if not z1.any() or not z0.any():
            skipped.append(str(lab))
            continue
        w1, w0 = ds.w[z1].sum(), ds.w[z0].sum()
        n1, n0 = int(z1.sum()), int(z0.sum())
        lhs, tols = {}, {}
        for y, d in CELLS:
            p1 = ds.w[z1] @ ((ds.y[z1] == y) & (ds.d[z1] == d)) / w1
            p0 = ds.w[z0] @ ((ds.y[z0] == 1 - y) & (ds.d[z0] == d)) / w0
            lhs[(y, d)] = float(p1 + p0)
            tols[(y, d)] = float(tol) if tol is not None else \
                2.0 * math.sqrt(p1 * (1 - p1) / n1 + p0 * (1 - p0) / n0)
        slack = max(lhs[c] - 1.0 for c in CELLS)
        viol = any(lhs[c] > 1.0 + tols[c] for c in CELLS)
        records.append(StratumRecord(str(lab), lhs, tols, slack, viol,
                                     float(ds.w[m].sum() / total_w), int(m.sum())))
    return IvInequalityReport(records, skipped)


test_iv_inequalities.__test__ = False   # keep pytest from collecting it


def feasibility_band(p1y, p0y, p1d, p0d):
    """Admissible range ``(lo, hi)`` for ``x1 - x0`` given the four cell probabilities.

    Works elementwise on arrays.
    """
    args = [np.asarray(a, dtype=float) for a in (p1y, p0y, p1d, p0d)]
    if any(np.any((a < 0) | (a > 1)) for a in args):
        raise ValueError("probabilities must lie in [0, 1]")
    p1y, p0y, p1d, p0d = args
    lo = np.maximum(p1y - p0y - p0d, p1d - 1.0)
    hi = np.minimum(1.0 - p0d, p1y + p1d - p0y)
    if np.any(lo > hi):
        raise AssertionError("feasibility band is empty")
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi
