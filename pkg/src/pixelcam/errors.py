"""Exception hierarchy shared by every pixelcam module."""


class PixelCamError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PixelCamError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(PixelCamError, ValueError):
    """A configuration value is outside its valid domain."""


class StateError(PixelCamError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class TrainingError(PixelCamError, RuntimeError):
    """Optimization diverged or produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class FormatError(PixelCamError, ValueError):
    """A file on disk does not follow the expected layout."""


class UndefinedMetricError(PixelCamError, ValueError):
    """A metric has no defined value for the given input (e.g. no positive pixels)."""
