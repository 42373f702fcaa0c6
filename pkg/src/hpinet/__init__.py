"""Hierarchical pixel integration network for lightweight super-resolution."""
from .config import HpiConfig, TrainConfig
from .errors import (ConfigError, FormatError, GeometryError, HpiError, IntegrityError,
                     NumericError, ShapeError, UsageError)
from .model import count_params, forward, init_params, load_checkpoint, save_checkpoint

__all__ = [
    "HpiConfig", "TrainConfig", "count_params", "forward", "init_params",
    "load_checkpoint", "save_checkpoint", "ConfigError", "FormatError", "GeometryError",
    "HpiError", "IntegrityError", "NumericError", "ShapeError", "UsageError",
]
