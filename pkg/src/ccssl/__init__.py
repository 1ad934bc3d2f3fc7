"""Class-aware contrastive semi-supervised learning on a small numpy autodiff core."""

from .errors import (CCSSLError, ConfigError, ContractError, DegenerateEmbeddingError,
                     DimensionError, FormatError, TrainingDivergenceError)
from .trainer import ExperimentConfig, run_experiment, run_grid

__version__ = "0.1.0"

__all__ = [
    "CCSSLError", "ConfigError", "ContractError", "DegenerateEmbeddingError", "DimensionError",
    "FormatError", "TrainingDivergenceError", "ExperimentConfig", "run_experiment", "run_grid",
]
