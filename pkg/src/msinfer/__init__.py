"""Multiscale Bayesian inference with triangular transport maps.

Coarse transport maps are built from prior samples, the low-dimensional
coarse posterior is sampled with MCMC in reference coordinates, and coarse
samples are prolonged to fine-scale posterior samples.
"""
from .basis import MultiIndexSet, localized_set_1d, total_degree_set
from .engine import (BudgetModel, MultiscaleProblem, PipelineOptions, PosteriorEnsemble,
                     estimate_variance_constants, optimal_allocation, run_pipeline)
from .exceptions import ConfigError, MultiscaleError, NumericalError
from .prior import GaussianFieldPrior, GridGeometry
from .sampler import ChainConfig, TargetDensity, dram_run, premala_run
from .transport import (BuildOptions, LinearConditionalMap, StationaryCoarseMap, TriangularMap,
                        build_map)

__version__ = "0.1.0"

__all__ = [
    "MultiIndexSet", "localized_set_1d", "total_degree_set", "BudgetModel", "MultiscaleProblem",
    "PipelineOptions", "PosteriorEnsemble", "estimate_variance_constants", "optimal_allocation",
    "run_pipeline", "ConfigError", "MultiscaleError", "NumericalError", "GaussianFieldPrior",
    "GridGeometry", "ChainConfig", "TargetDensity", "dram_run", "premala_run", "BuildOptions",
    "LinearConditionalMap", "StationaryCoarseMap", "TriangularMap", "build_map",
]
