"""Loading, validating and preprocessing observational IV datasets."""
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError, DegenerateDataError, SchemaError, ValidationError

MISSING_TOKENS = ("", "NA")
INTERCEPT = "intercept"


@dataclass(frozen=True)
class ObservedSample:
    z: int
    d: int
    y: float
    x: np.ndarray
    w: float = 1.0


@dataclass(frozen=True)
class ColumnMap:
    instrument: str
    treatment: str
    outcome: str
    covariates: Sequence[str] = ()
    weight: Optional[str] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented sample.

    ``x`` carries the intercept in column 0; ``w`` is normalised to mean 1 so
    that the empirical mean of any per-unit quantity ``f`` is ``w @ f / n``.
    """
    z: np.ndarray
    d: np.ndarray
    y: np.ndarray
    x: np.ndarray
    w: np.ndarray
    binary_outcome: bool
    column_names: List[str]
    metadata: Dict = field(default_factory=dict)

    @property
    def n(self):
        return self.z.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> ObservedSample:
        return ObservedSample(int(self.z[i]), int(self.d[i]), float(self.y[i]),
                              self.x[i].copy(), float(self.w[i]))

    def samples(self):
        return [self[i] for i in range(self.n)]

    def mean(self, values):
        """Weighted empirical mean along the first axis."""
        return self.w @ values / self.n

    def columns(self, names):
        """Design sub-matrix for the named covariate columns (``None`` = all)."""
        if names is None:
            return self.x
        idx = [self.column_index(c) for c in names]
        return self.x[:, idx]

    def column_index(self, name):
        try:
            return self.column_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate column {name!r}") from None

    def take(self, rows):
        """Row subset/resample; weights are renormalised to mean 1."""
        rows = np.asarray(rows)
        return from_arrays(self.z[rows], self.d[rows], self.y[rows], self.x[rows],
                           w=self.w[rows], binary_outcome=self.binary_outcome,
                           column_names=self.column_names, metadata=dict(self.metadata),
                           add_intercept=False)


def _normalise_weights(w):
    w = np.asarray(w, dtype=float)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("weights must be finite and positive",
                              rows=np.flatnonzero(~(w > 0)) + 1)
    mean = math.fsum(w) / w.shape[0]
    # leave already-normalised weights bit-identical (save/load round trip)
    if abs(mean - 1.0) > 1e-12:
        w = w / mean
    return w


def _check_binary(name, values):
    bad = np.flatnonzero((values != 0) & (values != 1))
    if bad.size:
        rows = bad + 1
        shown = ", ".join(str(r) for r in rows[:10])
        raise ValidationError(f"{name} must be 0/1; offending rows: {shown}", rows=rows)


def from_arrays(z, d, y, x=None, w=None, *, binary_outcome=None, column_names=None,
                metadata=None, add_intercept=True) -> Dataset:
    """Build and validate a Dataset from array-likes.

    With ``add_intercept`` a constant column named ``intercept`` is prepended
    to ``x``. ``binary_outcome=None`` infers the flag from the values of ``y``.
    """
    z = np.asarray(z, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n = z.shape[0]
    if n == 0:
        raise DegenerateDataError("dataset has no rows")
    if d.shape[0] != n or y.shape[0] != n:
        raise SchemaError("z, d, y lengths differ")
    if x is None:
        x = np.empty((n, 0))
        column_names = []
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != n:
        raise SchemaError("covariate matrix has wrong number of rows")
    names = list(column_names) if column_names is not None else [f"x{j + 1}" for j in range(x.shape[1])]
    if len(names) != x.shape[1]:
        raise SchemaError("column_names length does not match covariates")
    if add_intercept:
        x = np.column_stack([np.ones(n), x])
        names = [INTERCEPT] + names
    if x.shape[1] == 0 or not np.all(x[:, 0] == 1.0):
        raise SchemaError("first covariate column must be the intercept (all ones)")
    _check_binary("instrument", z)
    _check_binary("treatment", d)
    if not np.all(np.isfinite(y)):
        raise ValidationError("outcome has non-finite values", rows=np.flatnonzero(~np.isfinite(y)) + 1)
    is_binary = bool(np.all((y == 0) | (y == 1)))
    if binary_outcome is None:
        binary_outcome = is_binary
    elif binary_outcome and not is_binary:
        _check_binary("outcome", y)
    w = np.ones(n) if w is None else _normalise_weights(np.asarray(w, dtype=float).ravel())
    if w.shape[0] != n:
        raise SchemaError("weight length differs from data")
    if not (w[z == 1].sum() > 0 and w[z == 0].sum() > 0):
        raise DegenerateDataError("both instrument arms must be present")
    return Dataset(z, d, y, x, w, bool(binary_outcome), names, dict(metadata or {}))


def _parse_cell(text, col, row):
    text = text.strip()
    if text in MISSING_TOKENS:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"row {row}, column {col!r}: not a number: {text!r}", rows=[row]) from None


def load_csv(path, column_map: ColumnMap, *, binary_outcome=None) -> Dataset:
    """Read a headered UTF-8 CSV into a validated Dataset.

    Rows with a missing instrument, treatment or outcome are dropped; the
    count is stored in ``metadata["dropped_rows"]``. Missing covariates are
    kept as NaN (see :func:`impute_mean_with_indicators`). Row numbers in
    error messages are 1-based data rows (header excluded).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    wanted = [column_map.instrument, column_map.treatment, column_map.outcome,
              *column_map.covariates]
    if column_map.weight:
        wanted.append(column_map.weight)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"columns not found in header: {', '.join(missing)}")
    pos = {c: header.index(c) for c in wanted}

    def column(name):
        out = np.empty(len(rows))
        for i, r in enumerate(rows):
            if len(r) != len(header):
                raise SchemaError(f"row {i + 1} has {len(r)} fields, header has {len(header)}")
            out[i] = _parse_cell(r[pos[name]], name, i + 1)
        return out

    z = column(column_map.instrument)
    d = column(column_map.treatment)
    y = column(column_map.outcome)
    # validate binary columns against original row numbers before dropping
    for name, vals in (("instrument", z), ("treatment", d)):
        ok = np.isnan(vals) | (vals == 0) | (vals == 1)
        if not np.all(ok):
            bad = np.flatnonzero(~ok) + 1
            raise ValidationError(f"{name} must be 0/1; offending rows: "
                                  + ", ".join(str(r) for r in bad[:10]), rows=bad)
    covs = (np.column_stack([column(c) for c in column_map.covariates])
            if column_map.covariates else np.empty((len(rows), 0)))
    w = column(column_map.weight) if column_map.weight else np.ones(len(rows))

    keep = ~(np.isnan(z) | np.isnan(d) | np.isnan(y))
    dropped = int((~keep).sum())
    if np.any(np.isnan(w[keep])):
        bad = np.flatnonzero(keep & np.isnan(w)) + 1
        raise ValidationError("missing weight in rows " + ", ".join(map(str, bad[:10])), rows=bad)
    meta = {"source": str(path), "dropped_rows": dropped,
            "instrument": column_map.instrument, "treatment": column_map.treatment,
            "outcome": column_map.outcome, "weight": column_map.weight}
    return from_arrays(z[keep], d[keep], y[keep], covs[keep], w[keep],
                       binary_outcome=binary_outcome,
                       column_names=list(column_map.covariates), metadata=meta)


def save_csv(ds: Dataset, path):
    """Write ``ds`` with 17 significant digits; the intercept is not written."""
    meta = ds.metadata
    names = [meta.get("instrument") or "z", meta.get("treatment") or "d",
             meta.get("outcome") or "y"]
    covs = ds.column_names[1:]
    wname = meta.get("weight") or "w"
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + covs + [wname])
        for i in range(ds.n):
            vals = [ds.z[i], ds.d[i], ds.y[i], *ds.x[i, 1:], ds.w[i]]
            writer.writerow(["NA" if math.isnan(v) else f"{v:.17g}" for v in vals])


def column_map_for_saved(ds: Dataset) -> ColumnMap:
    """ColumnMap that reads back a file written by :func:`save_csv`."""
    meta = ds.metadata
    return ColumnMap(meta.get("instrument") or "z", meta.get("treatment") or "d",
                     meta.get("outcome") or "y", tuple(ds.column_names[1:]),
                     meta.get("weight") or "w")


def impute_mean_with_indicators(ds: Dataset, cols) -> Dataset:
    """Replace missing covariate values by the weighted column mean.

    An indicator column ``<name>_missing`` is appended for every column that
    had at least one missing value.
    """
    protected = {ds.metadata.get(k) for k in ("instrument", "treatment", "outcome", "weight")}
    protected |= {"z", "d", "y", "w", INTERCEPT}
    x = ds.x.copy()
    names = list(ds.column_names)
    extra, extra_names = [], []
    for col in cols:
        if col in protected and col not in names[1:]:
            raise DataError(f"cannot impute {col!r}: only covariates are imputed")
        if col == INTERCEPT:
            raise DataError("cannot impute the intercept")
        j = ds.column_index(col)
        miss = np.isnan(x[:, j])
        if not miss.any():
            continue
        if miss.all():
            raise DataError(f"column {col!r} has no observed values")
        obs = ~miss
        x[miss, j] = ds.w[obs] @ x[obs, j] / ds.w[obs].sum()
        extra.append(miss.astype(float))
        extra_names.append(f"{col}_missing")
    if not extra:
        return ds
    x = np.column_stack([x] + extra)
    meta = dict(ds.metadata)
    meta.setdefault("imputed", []).extend(extra_names)
    return replace(ds, x=x, column_names=names + extra_names, metadata=meta)


def weighted_median(values, weights):
    order = np.argsort(values, kind="stable")
    v, w = np.asarray(values, float)[order], np.asarray(weights, float)[order]
    cum = np.cumsum(w)
    half = cum[-1] / 2.0
    lower = v[np.searchsorted(cum, half, side="left")]
    upper = v[min(np.searchsorted(cum, half, side="right"), len(v) - 1)]
    # exact-half ties average the straddling values, as for an even unweighted median
    if np.isclose(cum[np.searchsorted(cum, half, side="left")], half, rtol=1e-12, atol=0):
        return 0.5 * (lower + upper)
    return lower


def dichotomize(ds: Dataset, threshold="median") -> Dataset:
    """Replace ``y`` by ``1(y > t)``; ``threshold`` is ``"median"`` or a number."""
    if ds.binary_outcome or np.all((ds.y == 0) | (ds.y == 1)):
        raise DataError("outcome is already binary")
    if threshold == "median":
        t = float(weighted_median(ds.y, ds.w))
    else:
        t = float(threshold)
    y = (ds.y > t).astype(float)
    meta = dict(ds.metadata, dichotomize_threshold=t)
    return replace(ds, y=y, binary_outcome=True, metadata=meta)


def require_complete(ds: Dataset, names=None):
    """Raise if any used covariate is still missing."""
    x = ds.columns(names)
    if np.any(np.isnan(x)):
        cols = [ds.column_names[j] for j in np.flatnonzero(np.isnan(ds.x).any(axis=0))]
        raise ValidationError("missing covariate values in " + ", ".join(cols)
                              + "; impute them first")
