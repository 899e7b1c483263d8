"""Adversarial GMM: conditional-moment estimation as a modeler/critic game."""

from agmm.data import Dataset, Rng, empirical_mean, sample_batch
from agmm.mlp import AdamState, MlpModel, ProjectionSpec, init_params
from agmm.critics import CriticSet
from agmm.trainer import TrainConfig, TrainResult, train
from agmm.dgp import DgpConfig, TrueFn, generate

__all__ = [
    "AdamState",
    "CriticSet",
    "Dataset",
    "DgpConfig",
    "MlpModel",
    "ProjectionSpec",
    "Rng",
    "TrainConfig",
    "TrainResult",
    "TrueFn",
    "empirical_mean",
    "generate",
    "init_params",
    "sample_batch",
    "train",
]

__version__ = "0.1.0"
