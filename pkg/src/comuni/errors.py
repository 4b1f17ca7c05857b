"""Exception types shared across the package."""


class ComuniError(Exception):
    """Base class for all package-specific errors."""


class ClipFormatError(ComuniError):
    """Raised when a clip container file is malformed or truncated."""


class DimensionRangeError(ComuniError):
    """Raised when array dimensions cannot be represented in the container."""


class ConfigError(ComuniError, ValueError):
    """Raised when a configuration violates an invariant."""


class ShapeError(ComuniError, ValueError):
    """Raised when array shapes do not match a contract."""


class DomainError(ComuniError, ValueError):
    """Raised when a scalar argument falls outside its valid domain."""


class CompatibilityError(ComuniError):
    """Raised when artifacts built under different configs are mixed."""


class TrainingDivergenceError(ComuniError):
    """Raised when a loss turns non-finite; carries the loss breakdown."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})


class SamplingDivergenceError(ComuniError):
    """Raised when reverse diffusion produces non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
