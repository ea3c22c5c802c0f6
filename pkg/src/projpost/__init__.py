"""Projected Bayesian posteriors for small MLPs.

The kernel of the training Jacobian is reached matrix-free by alternating
projections over data batches; dense oracles check the results on small
fixtures.
"""

from .dataflow import Dataset, gen_ood_blob, gen_toy_regression, gen_two_moons
from .errors import ConfigError, NumericError, ProjPostError
from .netcore import MLP, ArchitectureSpec, build_network
from .posterior import PosteriorKind, SampleSet, optimal_alpha, predict, predictive_linearized, sample_projected
from .projector import DenseProjector, KernelProjector, build_projector, dense_kernel_projector
from .trainer import TrainConfig, train_map

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "ConfigError", "Dataset", "DenseProjector", "KernelProjector", "MLP",
    "NumericError", "PosteriorKind", "ProjPostError", "SampleSet", "TrainConfig", "build_network",
    "build_projector", "dense_kernel_projector", "gen_ood_blob", "gen_toy_regression", "gen_two_moons",
    "optimal_alpha", "predict", "predictive_linearized", "sample_projected", "train_map",
]
