"""Causal diffusion posterior sampling over multi-resolution hazard grids."""

from .artifacts import __version__
from .graph import CausalGraph, LatentNode, sample_prior
from .multires import Grid, ObservationSource
from .pipeline import build_model, infer, run_rollout, run_static, train_scores
from .sampler import Model, PosteriorEnsemble, elbo, fit, sample_posterior
from .scenario import ScenarioConfig, evaluate, generate_scenario, load_config

__all__ = [
    "CausalGraph", "Grid", "LatentNode", "Model", "ObservationSource", "PosteriorEnsemble",
    "ScenarioConfig", "__version__", "build_model", "elbo", "evaluate", "fit",
    "generate_scenario", "infer", "load_config", "run_rollout", "run_static", "sample_prior",
    "sample_posterior", "train_scores",
]
