"""Referring-expression segmentation with language-generated convolution kernels."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    DimensionError,
    GenerationError,
    LingsegError,
    ParameterError,
    TrainingError,
)
from .tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "LingsegError",
    "DimensionError",
    "ParameterError",
    "ConfigError",
    "ContractError",
    "GenerationError",
    "DatasetError",
    "CheckpointError",
    "TrainingError",
    "__version__",
]
