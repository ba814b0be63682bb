"""Multi-task person re-identification: joint identity, center and attribute training."""

from .config import ConfigError, RunConfig, load_config
from .evaluator import average_precision, attribute_average_precision, cmc, make_split, make_trials
from .losses import Centers, LossWeights, center_loss, identity_loss, total_loss, update_centers
from .matcher import SignatureStore, cosine_distance, cosine_distances, extract, rank
from .model import Model, ModelConfig
from .trainer import Hyperparameters, Trainer, TrainingLog, run_stage

__version__ = "0.1.0"

__all__ = [
    "Centers", "ConfigError", "Hyperparameters", "LossWeights", "Model", "ModelConfig", "RunConfig",
    "SignatureStore", "Trainer", "TrainingLog", "attribute_average_precision", "average_precision",
    "center_loss", "cmc", "cosine_distance", "cosine_distances", "extract", "identity_loss",
    "load_config", "make_split", "make_trials", "rank", "run_stage", "total_loss", "update_centers",
]
