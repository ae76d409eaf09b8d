"""relight: low-light image enhancement with a selective state-space
network (global scan mixing, then gated local refinement), built on a
from-scratch rank-4 autodiff engine."""

__version__ = "0.1.0"

from . import backend
from .model import Enhancer, ModelConfig, init_model, named_params, param_count
from .tensor import Tensor, tape
from .train import TrainConfig, mae_loss, train

__all__ = [
    "backend",
    "Enhancer",
    "ModelConfig",
    "TrainConfig",
    "Tensor",
    "tape",
    "init_model",
    "named_params",
    "param_count",
    "mae_loss",
    "train",
    "__version__",
]
