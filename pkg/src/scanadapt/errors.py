"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
data problems exit 2, numeric blow-ups exit 3.
"""


class ScanAdaptError(Exception):
    """Base class for all package errors."""


class ConfigError(ScanAdaptError, ValueError):
    """Inconsistent shapes, dimensions, modes or settings."""


class InputError(ScanAdaptError, ValueError):
    """Invalid argument values (empty sets, out-of-range targets, ...)."""


class DataError(ScanAdaptError):
    """Missing or malformed files, failed simulations."""


class ParseError(DataError):
    """Malformed mesh / point-cloud / checkpoint file."""

    def __init__(self, message, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class NumericError(ScanAdaptError, FloatingPointError):
    """NaN or Inf encountered in a forward or backward pass."""
