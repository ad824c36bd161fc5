"""Noise-robust deep metric learning with subgroup-based positive pair selection."""

from sgps.datagen import Dataset, gen_mixture, inject_small_cluster, inject_symmetric
from sgps.estimator import SGPSEmbedder
from sgps.numkit import EmbeddingNet, Rng, cosine_sim, l2_normalize
from sgps.trainer import EpochReport, TrainConfig, evaluate, train

__all__ = [
    "Dataset",
    "EmbeddingNet",
    "EpochReport",
    "Rng",
    "SGPSEmbedder",
    "TrainConfig",
    "cosine_sim",
    "evaluate",
    "gen_mixture",
    "inject_small_cluster",
    "inject_symmetric",
    "l2_normalize",
    "train",
]

__version__ = "0.1.0"
