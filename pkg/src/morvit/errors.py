"""Exception types shared across the package."""


class MorvitError(Exception):
    """Base class for all package errors."""


class ShapeError(MorvitError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(MorvitError):
    """A run-config file or config value is invalid."""


class DataError(MorvitError):
    """A data file is malformed, truncated, or geometrically incompatible."""


class NumericError(MorvitError):
    """A NaN/Inf appeared where all values must be finite."""
