"""Partial video domain adaptation with temporal attention over frame features.

Submodules:

``autodiff``     reverse-mode differentiation over float64 matrices
``model``        spatial and multi-scale temporal heads with label attention
``filtration``   source-class weights that suppress outlier classes
``training``     source-only, DANN, PADA and PATAN objectives and the SGD loop
``data``         synthetic source/target generator and feature CSV I/O
``experiments``  seeded comparison grids
"""

from .data import (
    LABEL_AUDIT,
    GeneratorSpec,
    SplitDataset,
    VideoSample,
    default_benchmark,
    generate,
)
from .errors import (
    ConfigError,
    InputError,
    PvdaError,
    TrainingDivergedError,
    UsageError,
)
from .model import ModelConfig, PatanModel, forward
from .training import TrainConfig, train

__all__ = [
    "LABEL_AUDIT",
    "ConfigError",
    "GeneratorSpec",
    "InputError",
    "ModelConfig",
    "PatanModel",
    "PvdaError",
    "SplitDataset",
    "TrainConfig",
    "TrainingDivergedError",
    "UsageError",
    "VideoSample",
    "default_benchmark",
    "forward",
    "generate",
    "train",
]

__version__ = "0.1.0"
