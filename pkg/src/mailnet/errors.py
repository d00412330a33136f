"""Exception types shared across the package."""


class MailError(Exception):
    """Base class for all package errors."""


class DimensionError(MailError, ValueError):
    """Tensor shapes do not line up."""


class ConfigError(MailError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(MailError, RuntimeError):
    """An operation was called outside its documented contract."""


class StateError(MailError, RuntimeError):
    """An object is not in the state the call requires."""


class NumericError(MailError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(MailError, ValueError):
    """A binary container failed validation.

    ``offset`` is the byte position where the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(MailError, ValueError):
    """Labels or samples violate the dataset contract."""
