"""Exception hierarchy shared across the package.

The CLI maps each family onto a stable exit code (see ``stbd.cli``).
"""


class STBDError(Exception):
    """Base class for every error raised by this package."""


class UsageError(STBDError, ValueError):
    """Caller passed arguments that violate an operation's preconditions."""


class ConfigError(UsageError):
    """Configuration key unknown, malformed, or out of range."""


class DimensionError(UsageError):
    """Operand shapes are incompatible."""


class NumericError(STBDError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class DataError(STBDError):
    """Corpus, manifest, or feature file is missing or inconsistent."""


class CheckpointError(DataError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
