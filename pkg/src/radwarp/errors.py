"""Exception types shared across the package."""


class RadwarpError(Exception):
    """Base class for package errors."""


class ConfigurationError(RadwarpError, ValueError):
    """Inconsistent configuration: frame mismatch, malformed config file, bad parameter."""


class DomainError(RadwarpError, ValueError):
    """Input outside the mathematical domain of an operation."""


class TrainingDiverged(RadwarpError, RuntimeError):
    """Training loss blew up or produced non-finite values."""
