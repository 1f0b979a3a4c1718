"""Exception types raised across the package."""


class CallosumError(Exception):
    """Base class for all package errors."""


class ValidationError(CallosumError, ValueError):
    """Input violates a documented precondition."""


class FrozenModelError(CallosumError, RuntimeError):
    """Attempt to use or mutate a model in the wrong freeze state."""


class CertificateError(CallosumError):
    """An unlearning certificate could not be produced or verified."""
