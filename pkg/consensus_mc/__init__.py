"""Data-parallel MCMC with variationally optimized consensus aggregation."""

from __future__ import annotations

from .aggregation import (
    AggregatedSampleSet,
    AggregationFamily,
    Alignment,
    WeightSet,
    aggregate,
    aggregate_combinatorial,
    aggregate_linear,
    aggregate_spectral,
    align_clusters,
    canonical_eigendecomposition,
    gaussian_weights,
    uniform_weights,
)
from .config import ExperimentConfig, load_config
from .coordinator import ExperimentCoordinator
from .exceptions import ConsensusError
from .models import MixtureSpec, NIWSpec, ProbitSpec, TemperingMode
from .samplers import SamplerConfig, partition_data, run_parallel, run_serial
from .variational import ObjectiveConfig, optimize

__version__ = "0.1.0"

__all__ = [
    "AggregatedSampleSet",
    "AggregationFamily",
    "Alignment",
    "ConsensusError",
    "ExperimentConfig",
    "ExperimentCoordinator",
    "MixtureSpec",
    "NIWSpec",
    "ObjectiveConfig",
    "ProbitSpec",
    "SamplerConfig",
    "TemperingMode",
    "WeightSet",
    "aggregate",
    "aggregate_combinatorial",
    "aggregate_linear",
    "aggregate_spectral",
    "align_clusters",
    "canonical_eigendecomposition",
    "gaussian_weights",
    "load_config",
    "optimize",
    "partition_data",
    "run_parallel",
    "run_serial",
    "uniform_weights",
]
