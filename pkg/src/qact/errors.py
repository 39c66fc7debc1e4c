class QactError(Exception):
    """Base class for errors raised by this package."""


class DomainError(QactError, ValueError):
    """Input outside the admissible domain (singular axis, bad grid, ...)."""


class NumericalError(QactError, RuntimeError):
    """A numerical procedure failed its own accuracy or convergence check."""


class ConfigError(QactError, ValueError):
    """Malformed run configuration."""
