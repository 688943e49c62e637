"""Exception and warning types shared across the toolkit."""


class SpatialPopError(Exception):
    """Base class for toolkit errors."""


class ParameterError(SpatialPopError, ValueError):
    """A parameter is outside the domain where the model or formula is valid."""


class NoMotionError(ParameterError):
    """A migration kernel has zero total rate where a jump was requested."""


class ConfigurationError(SpatialPopError):
    """An experiment or simulation request cannot be carried out as configured."""


class IntegrityError(SpatialPopError):
    """Stored data (ancestry log, distance matrix) violates a structural invariant."""


class BudgetExceeded(SpatialPopError):
    """A run would exceed, or has exceeded, its configured compute budget."""


class NumericalFailure(SpatialPopError, FloatingPointError):
    """NaN or overflow during time stepping."""

    def __init__(self, message, site=None, step=None):
        super().__init__(f"{message} (site={site}, step={step})")
        self.site = site
        self.step = step


class ConvergenceWarning(UserWarning):
    """A long-run estimator shows signs of not having reached stationarity."""


class DivergentSumWarning(UserWarning):
    """A truncated series carries more tail mass than the requested tolerance."""
