"""Exception types shared across the package."""


class BevOccError(Exception):
    """Base class for all package errors."""


class ShapeError(BevOccError, ValueError):
    pass


class NumericsError(BevOccError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DomainError(BevOccError, ValueError):
    pass


class ConfigError(BevOccError, ValueError):
    pass


class IoError(BevOccError, OSError):
    pass
