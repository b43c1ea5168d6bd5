"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericsError -> 3.
"""


class MaskCodecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MaskCodecError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(MaskCodecError):
    """Invalid or inconsistent configuration."""


class DataError(MaskCodecError):
    """Unusable input data: bad image files, corrupt bitstreams, bad checkpoints."""


class NumericsError(MaskCodecError):
    """Non-finite values where finite ones are required (NaN/Inf aborts)."""
