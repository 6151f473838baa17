"""Bounded, multiply robust estimation of the average Wald estimand.

Binary instrument ``Z``, binary treatment ``D``, outcome ``Y`` and baseline
covariates ``X``. The target is ``Delta = E_X[delta^Y(X) / delta^D(X)]``,
the covariate-averaged ratio of instrument-outcome and instrument-treatment
risk differences.
"""
__version__ = "0.1.0"

from .data import ColumnMap, Dataset, from_arrays, load_csv, save_csv
from .errors import (ConvergenceError, DataError, DomainError, IVError, NumericalError,
                     PositivityError, SingularMatrixError)
from .estimators import REGISTRY, EstimateReport, EstimatorConfig, estimate, estimate_all
from .inference import BootstrapConfig, bootstrap_ci
from .param import WaldParams, CellProbs, map_forward, map_inverse

__all__ = [
    "ColumnMap", "Dataset", "from_arrays", "load_csv", "save_csv",
    "IVError", "DataError", "NumericalError", "DomainError", "ConvergenceError",
    "SingularMatrixError", "PositivityError",
    "REGISTRY", "EstimateReport", "EstimatorConfig", "estimate", "estimate_all",
    "BootstrapConfig", "bootstrap_ci",
    "WaldParams", "CellProbs", "map_forward", "map_inverse",
]
