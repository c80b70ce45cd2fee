"""Exception types shared across the package."""


class EriError(Exception):
    """Base class for all package errors."""


class ContractError(EriError, ValueError):
    """An input violates a shape or layout contract (e.g. mismatched shapes)."""


class DomainError(EriError, ValueError):
    """An input is outside the domain an operation is defined on."""


class FormatError(EriError):
    """A file or serialized document is malformed, truncated or incompatible."""


class NumericError(EriError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""
