"""Exceptions raised by the consensus Monte Carlo engine."""

from __future__ import annotations

from typing import Any


class ConsensusError(Exception):
    """Base exception for consensus Monte Carlo errors."""


class ConfigError(ConsensusError):
    """The experiment configuration is invalid or references missing files."""


class ModelDomainError(ConsensusError):
    """A parameter or dataset lies outside a model's domain."""


class SamplerError(ConsensusError):
    """A sampler was misconfigured or failed while drawing."""

    def __init__(self, message: str, partition_index: int | None = None) -> None:
        if partition_index is not None:
            message = f"partition {partition_index}: {message}"
        super().__init__(message)
        self.partition_index = partition_index


class WeightSetError(ConsensusError):
    """Aggregation weights violate the simplex, floor, shape or family rules."""


class OptimizationError(ConsensusError):
    """Projected SGD aborted; the partial trace is kept on the exception."""

    def __init__(self, message: str, trace: Any = None) -> None:
        super().__init__(message)
        self.trace = trace


class EvaluationError(ConsensusError):
    """Test functions could not be evaluated or summarized."""


class StorageError(ConsensusError):
    """A persisted file is malformed or inconsistent with its header."""


class StageError(ConsensusError):
    """A pipeline stage failed."""

    def __init__(self, stage: str, err: Exception) -> None:
        super().__init__(f"stage '{stage}' failed: {err}")
        self.stage = stage
        self.cause = err
