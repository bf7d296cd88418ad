"""Exception types shared across the package."""


class DecifrError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(DecifrError, ValueError):
    pass


class InvalidInputError(DecifrError, ValueError):
    pass


class ProtocolError(DecifrError):
    """Federated messages that do not fit together (length/shape mismatch)."""


class NotFoundError(DecifrError, LookupError):
    pass


class InsufficientDataError(DecifrError, ValueError):
    pass


class NonFiniteError(DecifrError, FloatingPointError):
    """A loss or gradient became NaN/inf; carries a diagnostic message."""


class DifferentiationError(DecifrError, RuntimeError):
    """Raised when derivatives cannot be propagated through a computation."""
