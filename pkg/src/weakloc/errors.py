"""Exception hierarchy shared by every pipeline stage."""


class WeaklocError(Exception):
    """Base class for all package errors."""


class GeometryError(WeaklocError):
    """Missing or invalid scan geometry."""


class NumericError(WeaklocError):
    """Non-finite values, divergence or NaN losses."""


class DataError(WeaklocError):
    """Malformed manifests, empty classes, empty splits."""


class SplitError(DataError):
    """A subject-level split cannot be formed."""


class ConfigError(WeaklocError):
    """Invalid or unknown configuration values."""
