"""Exception types raised across the package."""


class GedError(Exception):
    """Base class for all package errors."""


class ShapeError(GedError, ValueError):
    """Array shapes or channel counts do not line up."""


class DomainError(GedError, ValueError):
    """A scalar argument lies outside its admissible range."""


class OrderingError(GedError, ValueError):
    """Diffusion times passed in the wrong order."""


class ConfigError(GedError, ValueError):
    """Invalid configuration."""


class DataGapError(GedError):
    """Missing hours in an hourly time index.

    ``missing`` holds the absent timestamps as ``numpy.datetime64[h]``.
    """

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class TrainingError(GedError, RuntimeError):
    """Training diverged or could not start."""
