"""STab: a stochastic-competition transformer for tabular data, on a small numpy autodiff core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, build_config, load_config
from .data import (
    Dataset,
    DatasetSchema,
    Encoded,
    Preprocessor,
    evaluate,
    fit_preprocessor,
    load_csv,
    make_synthetic,
)
from .errors import StabError
from .model import (
    VARIANTS,
    ModelConfig,
    StabModel,
    count_parameters,
    forward,
    predict_bayesian,
    predict_labels,
    variant_config,
)
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "Dataset",
    "DatasetSchema",
    "Encoded",
    "ExperimentConfig",
    "ModelConfig",
    "Preprocessor",
    "StabError",
    "StabModel",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_config",
    "count_parameters",
    "evaluate",
    "fit_preprocessor",
    "forward",
    "load_checkpoint",
    "load_config",
    "load_csv",
    "make_synthetic",
    "no_grad",
    "predict_bayesian",
    "predict_labels",
    "save_checkpoint",
    "train",
    "variant_config",
]
