"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see ``lirdrec.cli``).
"""


class LirdrecError(Exception):
    """Base class for all package errors."""


class ConfigError(LirdrecError):
    """Invalid or inconsistent configuration."""


class DataError(LirdrecError):
    """Malformed, inconsistent, or missing input data."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    """A value or header violates the file format."""


class ChecksumError(DataError):
    pass


class DimensionError(DataError):
    """Shapes of two inputs that must agree do not."""


class PreconditionError(DataError):
    pass


class ShapeError(LirdrecError, ValueError):
    """Operands passed to a tensor op have incompatible shapes."""


class NonFiniteError(LirdrecError, FloatingPointError):
    """A NaN or Inf was produced in checked mode."""


class DivergenceError(LirdrecError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
