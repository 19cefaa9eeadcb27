"""Exception types shared across the package."""


class MoleError(Exception):
    """Base class for every error this package raises deliberately."""


class DimensionError(MoleError):
    """Operand shapes are incompatible; the message names both shapes."""


class ConfigError(MoleError):
    """Invalid configuration value; the message carries the field path."""


class ContractError(MoleError):
    """A documented precondition was violated by the caller."""


class EvaluationError(MoleError):
    """A numeric evaluation produced a non-finite value."""


class CheckpointError(MoleError):
    """Base class for checkpoint container failures."""


class BadMagicError(CheckpointError):
    """File does not start with the expected container magic."""


class BadVersionError(CheckpointError):
    """Container version is not supported."""


class TruncatedError(CheckpointError):
    """File ended before the declared directory/payload/trailer."""


class HashMismatchError(CheckpointError):
    """Stored trailer hash does not match the file contents."""
