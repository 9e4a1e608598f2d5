"""Exception types shared across the package."""


class FlowcastError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowcastError, ValueError):
    """Operand shapes do not conform for an operation."""


class ConfigError(FlowcastError, ValueError):
    """Invalid configuration (bad key, bad value, inconsistent sizes)."""


class DataError(FlowcastError, ValueError):
    """Malformed input data (CSV parse failures, NaNs, short series)."""


class NumericError(FlowcastError, RuntimeError):
    """Non-finite values encountered where finiteness is guaranteed."""


class CheckpointError(FlowcastError, ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""
