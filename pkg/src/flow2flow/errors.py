"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError (and its ShapeError subclass) -> 4.
"""


class ToolError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ToolError):
    """Invalid configuration: unknown key, bad value, inconsistent fields."""


class DataError(ToolError):
    """I/O and parsing failures: missing files, malformed image bytes, bad manifests."""


class NumericError(ToolError):
    """Numeric failures: non-finite values, singular matrices, domain violations."""


class ShapeError(NumericError):
    """Operand shapes incompatible with the requested operation."""
