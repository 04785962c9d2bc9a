"""Multiscale factor-mixture density estimation with an adaptive Gibbs sampler."""

from .dictionary import MultiscaleDictionary, SuffStats, fit_dictionary, precompute_stats
from .gibbs import PosteriorDraws, compute_weights, run_gibbs
from .inference import (
    FittedModel,
    ImputationResult,
    classify,
    fit,
    impute,
    inclusion_probabilities,
    log_density,
    predict_response,
)
from .model import Hyperparams
from .tree import ClusterTree, build_tree

__all__ = [
    "ClusterTree",
    "build_tree",
    "MultiscaleDictionary",
    "SuffStats",
    "fit_dictionary",
    "precompute_stats",
    "Hyperparams",
    "PosteriorDraws",
    "compute_weights",
    "run_gibbs",
    "FittedModel",
    "ImputationResult",
    "fit",
    "log_density",
    "impute",
    "predict_response",
    "classify",
    "inclusion_probabilities",
]

__version__ = "0.1.0"
