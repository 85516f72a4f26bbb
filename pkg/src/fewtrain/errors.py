"""Exception types shared across the package."""


class FewtrainError(Exception):
    """Base class for all package errors."""


class ShapeError(FewtrainError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class InputError(FewtrainError, ValueError):
    """Input values are outside an operation's domain."""


class ConfigError(FewtrainError, ValueError):
    """A configuration object violates its invariants."""


class UsageError(FewtrainError, RuntimeError):
    """An API was called in a way its contract forbids."""


class NonFiniteError(FewtrainError, ArithmeticError):
    """An operation produced NaN or Inf values."""


class CheckpointError(FewtrainError, ValueError):
    """A checkpoint payload is malformed or does not match its target."""
