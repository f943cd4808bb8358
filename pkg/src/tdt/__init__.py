"""Task-guided disentangled tuning on a numpy autodiff engine."""

from .data import TaskSpec, generate_corpus
from .encoder import ModelConfig, ModelParams, init_params
from .objective import TDTConfig, total_loss
from .trainer import TrainConfig, evaluate, train

__all__ = ["TaskSpec", "generate_corpus", "ModelConfig", "ModelParams", "init_params",
           "TDTConfig", "total_loss", "TrainConfig", "evaluate", "train"]
__version__ = "0.1.0"
