"""Exception types raised across the package."""


class PtgeoError(Exception):
    """Base class for all package errors."""

    kind = "error"


class InvalidInputError(PtgeoError, ValueError):
    kind = "invalid-input"


class ConfigError(PtgeoError, ValueError):
    """Configuration failed validation.

    ``errors`` holds every problem found, not only the first one.
    """

    kind = "configuration"

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors or [message])


class ConditioningError(PtgeoError, ArithmeticError):
    kind = "numerical-conditioning"


class KernelSingularityError(PtgeoError, ValueError):
    kind = "kernel-singularity"


class DegenerateSeriesError(PtgeoError, ValueError):
    kind = "degenerate-series"


class CheckpointError(PtgeoError):
    kind = "checkpoint"
