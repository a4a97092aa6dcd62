"""Exception types shared across the package."""


class DepthBevError(Exception):
    """Base class for all package errors."""


class DimensionError(DepthBevError):
    """Tensor or grid shapes are inconsistent with the requested operation."""


class BoundsError(DepthBevError):
    """A cell, pixel, or box location falls outside the addressed grid."""


class ConfigError(DepthBevError):
    """A configuration value is missing, malformed, or out of range."""


class ValidationError(DepthBevError):
    """An input violates a documented precondition."""


class NumericError(DepthBevError):
    """A computation produced NaN or Inf."""


class UsageError(DepthBevError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class StageError(DepthBevError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[stage:{stage}] {cause}")
        self.stage = stage
        self.cause = cause
