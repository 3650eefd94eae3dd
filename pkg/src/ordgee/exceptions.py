"""Exception hierarchy for ordgee."""


class OrdGEEError(Exception):
    """Base class for all package errors."""


class MalformedDataError(OrdGEEError, ValueError):
    """Input panel or CSV violates the data contract."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class InvalidParameterError(OrdGEEError, ValueError):
    """Regression parameters outside their domain (e.g. unordered cutpoints)."""


class InsufficientDataError(OrdGEEError):
    """Not enough observed pairs or subjects to estimate a quantity."""


class AssociationFitError(OrdGEEError):
    """The loglinear association model failed to converge."""

    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class IPFPError(OrdGEEError):
    """Iterative proportional fitting did not reach the margin tolerance."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class SeparationError(OrdGEEError):
    """Logistic/ordinal fit diverges because the outcome is separable."""


class ImputationError(OrdGEEError):
    """Chained-equation imputation failed."""


class PoolingError(OrdGEEError):
    """Too few usable fits to combine with Rubin's rules."""


class NonConvergenceError(OrdGEEError):
    """A fit did not converge; ``result`` carries the partial FitResult."""

    def __init__(self, message, result=None):
        self.result = result
        super().__init__(message)
