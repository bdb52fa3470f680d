"""Causal effects of multiple spatial exposures via spatially regularized tensor completion."""

from .estimator import (
    EffectEstimate, PipelineConfig, PipelineResult, StepError, aipw_estimate, effect_table,
    marginal_effect, oi_estimate, preprocess_outcomes, run_pipeline,
)
from .propensity import ExposureDesign, fit_multinomial, ipw_weights, predict_probs
from .simgen import ScenarioConfig, SyntheticDataset, benchmark, generate
from .spatial_basis import SpatialGraph, SpectralBasis, graph_basis, grid_graph, knn_graph
from .spgd import ConvergenceError, FitConfig, SpatialTuckerModel, spgd_fit
from .tensor_core import ContractError, Tensor3, TuckerFactors, hosvd, tucker_reconstruct

__version__ = "0.1.0"

__all__ = [
    "ContractError", "ConvergenceError", "EffectEstimate", "ExposureDesign", "FitConfig",
    "PipelineConfig", "PipelineResult", "ScenarioConfig", "SpatialGraph", "SpatialTuckerModel",
    "SpectralBasis", "StepError", "SyntheticDataset", "Tensor3", "TuckerFactors",
    "aipw_estimate", "benchmark", "effect_table", "fit_multinomial", "generate", "graph_basis",
    "grid_graph", "hosvd", "ipw_weights", "knn_graph", "marginal_effect", "oi_estimate",
    "predict_probs", "preprocess_outcomes", "run_pipeline", "spgd_fit", "tucker_reconstruct",
]
