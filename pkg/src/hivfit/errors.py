"""Exception hierarchy shared by the estimation modules."""


class HivFitError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HivFitError, ValueError):
    """Invalid settings, shapes or specifications."""


class DomainError(HivFitError, ValueError):
    """Input outside the region where a quantity is defined."""


class DataValidationError(HivFitError, ValueError):
    """Observations that violate the data contract."""


class IntegrationBlowup(HivFitError, ArithmeticError):
    """A state component exceeded the magnitude cap during integration."""

    def __init__(self, time: float, cap: float):
        self.time = float(time)
        self.cap = float(cap)
        super().__init__(f"integration blew up at t={self.time:g} (|state| > {cap:g} or non-finite)")


class SingularDesignError(HivFitError, ArithmeticError):
    """A local or global regression design is singular or rank deficient."""

    def __init__(self, message: str, times=()):
        self.times = tuple(float(t) for t in times)
        super().__init__(message)


class EstimationError(HivFitError, ArithmeticError):
    """An estimation stage could not produce estimates."""

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        prefix = f"[{stage}] " if stage else ""
        super().__init__(prefix + message)


class FitFailure(HivFitError, RuntimeError):
    """The optimizer never reached a penalty-free region."""
