"""Self-attention CNN models of single visual-cortex neurons, built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import ConfigError, CtxModError, DataError, MetricError, NumericError, ShapeError, TapeError
from .zoo import Model, ModelSpec, PRESET_NAMES, build, load, param_count, preset, save

__all__ = [
    "ConfigError", "CtxModError", "DataError", "MetricError", "NumericError", "ShapeError", "TapeError",
    "Model", "ModelSpec", "PRESET_NAMES", "build", "load", "param_count", "preset", "save",
]
