"""Exception types shared across the package."""


class CtxModError(Exception):
    """Base class for package errors."""


class ShapeError(CtxModError, ValueError):
    """Tensor or model shapes do not chain legally."""


class NumericError(CtxModError, ArithmeticError):
    """A NaN or Inf appeared in activations, gradients or a loss."""


class TapeError(CtxModError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, reused tape, ...)."""


class ConfigError(CtxModError, ValueError):
    """Invalid model spec, preset name, or training configuration."""


class DataError(CtxModError, ValueError):
    """Corrupt, truncated or inconsistent dataset/checkpoint file."""


class MetricError(CtxModError, ValueError):
    """A metric is undefined for the given inputs (e.g. constant series)."""
