"""Exception hierarchy shared across the package."""


class TractMILError(Exception):
    """Base class for all errors raised by tractmil."""


class ShapeError(TractMILError):
    """Array dimensions do not match the model or bag contract."""


class NumericError(TractMILError):
    """Non-finite values or violated numeric preconditions."""


class FormatError(TractMILError):
    """An input file does not conform to its documented format."""


class ConfigError(TractMILError):
    """Invalid configuration values or missing configured columns."""


class GeometryError(TractMILError):
    """Degenerate tract geometry (unclosed or too-short rings)."""


class DataError(TractMILError):
    """Dataset-level problems: degenerate classes, unknown cities, bad splits."""


class CheckpointError(TractMILError):
    """A checkpoint file is malformed or inconsistent."""
