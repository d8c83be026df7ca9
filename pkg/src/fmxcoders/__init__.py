"""Crosscoders with factorized (tensor-ring / CP) weights and stochastic layer masking."""

from .errors import ConfigError, DataError, DimensionError, FmxError, FormatError, TrainingError
from .model import CrosscoderModel, SparseCode, SparsifyMode, decode, encode, forward, param_count
from .training import TrainConfig, init_model, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CrosscoderModel",
    "DataError",
    "DimensionError",
    "FmxError",
    "FormatError",
    "SparseCode",
    "SparsifyMode",
    "TrainConfig",
    "TrainingError",
    "decode",
    "encode",
    "forward",
    "init_model",
    "param_count",
    "train",
]
