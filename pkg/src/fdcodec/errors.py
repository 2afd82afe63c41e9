"""Shared exception types for the codec package."""


class CodecError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(CodecError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigurationError(CodecError, ValueError):
    """A model, filterbank, or CLI configuration is inconsistent."""


class StateError(CodecError, RuntimeError):
    """An object was used before its required initialization."""


class NumericError(CodecError, ArithmeticError):
    """A computation degenerated: NaN/Inf values or a zero denominator."""
