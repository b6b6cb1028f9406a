"""Exception hierarchy shared across the package."""


class MFRNPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MFRNPError, ValueError):
    """Inconsistent dimensions, shapes or settings."""


class InputError(MFRNPError, ValueError):
    """Invalid user-supplied data (non-finite values, empty sets, bad ranges)."""


class TrainingError(MFRNPError, RuntimeError):
    """Raised when optimization produces non-finite values."""


class StateError(MFRNPError, RuntimeError):
    """An operation was invoked on an object in the wrong lifecycle state."""


class MetricError(MFRNPError, ValueError):
    """A metric is undefined for the supplied data."""
