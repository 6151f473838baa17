"""Exception hierarchy shared by all modules."""


class IVError(Exception):
    """Base class for every error raised by ivate."""


class DataError(IVError):
    """Problem with the input data (maps to CLI exit code 3)."""


class SchemaError(DataError):
    pass


class ValidationError(DataError):
    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []


class DegenerateDataError(DataError):
    pass


class NumericalError(IVError):
    """Numerical failure during estimation (maps to CLI exit code 4)."""

    def __init__(self, message, *, estimator=None, nuisance=None):
        super().__init__(message)
        self.estimator = estimator
        self.nuisance = nuisance


class DomainError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    """Iterative solver failed; carries the best iterate seen."""

    def __init__(self, message, *, best=None, residual_norm=None, iterations=None, **kwargs):
        super().__init__(message, **kwargs)
        self.best = best
        self.residual_norm = residual_norm
        self.iterations = iterations


class SingularMatrixError(NumericalError):
    pass


class PositivityError(NumericalError):
    pass
