"""Exception types shared across the package."""


class EmulatorError(Exception):
    """Base class for all package errors."""


class DimensionError(EmulatorError, ValueError):
    """Operand shapes do not agree."""


class DomainError(EmulatorError, ValueError):
    """A value lies outside the domain an operation accepts."""


class TrainingError(EmulatorError, ArithmeticError):
    """Non-finite quantity encountered while optimizing."""

    def __init__(self, message, *, epoch=None, batch=None, term=None, role=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.term = term
        self.role = role


class ConfigError(EmulatorError, ValueError):
    """Invalid configuration."""


class DataError(EmulatorError, ValueError):
    """Input data is missing, misaligned, or malformed."""


class CorruptFileError(DataError):
    """File failed magic, length, or checksum validation."""


class VersionMismatchError(DataError):
    """File format version is not supported."""
