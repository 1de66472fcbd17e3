"""Aggregation functions, baseline weights and cluster label alignment.

Weights are diagonal: partition k contributes w_k (elementwise) to every
aggregated draw, and for each coordinate the K weights lie on the simplex.
Three families share that representation:

* vector        - theta = sum_k w_k * theta_k on flattened parameters
* spectral      - Lambda = sum_k R_k' diag(w_k * D_k) R_k, PSD preserving
* combinatorial - per global cluster l, theta_l = sum_k w_kl * theta_{k, a_k[l]}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum
import logging
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment

from .const import (
    DEFAULT_WEIGHT_FLOOR,
    EIGENVECTOR_SIGN_TOLERANCE,
    MODEL_MIXTURE,
    MODEL_NIW,
    PSD_TOLERANCE,
    SIMPLEX_TOLERANCE,
    SYMMETRY_TOLERANCE,
    VARIANCE_REGULARIZER,
)
from .exceptions import ModelDomainError, WeightSetError
from .util import array_fingerprint

_LOGGER = logging.getLogger(__name__)

Array = NDArray[np.float64]


class AggregationFamily(StrEnum):
    """Shape of the aggregation function a WeightSet parametrizes."""

    VECTOR = "vector"
    SPECTRAL = "spectral"
    COMBINATORIAL = "combinatorial"


def family_for_model(model_tag: str) -> AggregationFamily:
    if model_tag == MODEL_NIW:
        return AggregationFamily.SPECTRAL
    if model_tag == MODEL_MIXTURE:
        return AggregationFamily.COMBINATORIAL
    return AggregationFamily.VECTOR


@dataclass(frozen=True, eq=False)
class Alignment:
    """Per-partition permutations; row k maps global label l to worker label a_k[l]."""

    permutations: NDArray[np.int64]

    def __post_init__(self) -> None:
        perms = np.asarray(self.permutations, dtype=np.int64)
        if perms.ndim != 2 or perms.shape[0] < 1:
            raise WeightSetError(f"alignment needs shape (K, L), got {perms.shape}")
        n_clusters = perms.shape[1]
        expected = np.arange(n_clusters)
        for k, row in enumerate(perms):
            if not np.array_equal(np.sort(row), expected):
                raise WeightSetError(f"alignment row {k} is not a permutation of range({n_clusters})")
        if not np.array_equal(perms[0], expected):
            raise WeightSetError("alignment of partition 0 must be the identity")
        object.__setattr__(self, "permutations", perms)

    @classmethod
    def identity(cls, n_partitions: int, n_clusters: int) -> Alignment:
        return cls(np.tile(np.arange(n_clusters), (n_partitions, 1)))

    @property
    def n_partitions(self) -> int:
        return int(self.permutations.shape[0])

    @property
    def n_clusters(self) -> int:
        return int(self.permutations.shape[1])

    def apply(self, draws: Array) -> Array:
        """Reorder cluster axes of (K, T, L, d) draws into global label order."""
        return np.stack([draws[k][:, self.permutations[k], :] for k in range(draws.shape[0])])


@dataclass(frozen=True, eq=False)
class WeightSet:
    """K diagonal aggregation weights on the per-coordinate simplex."""

    family: AggregationFamily
    weights: Array
    alignment: Alignment | None = None
    floor: float = DEFAULT_WEIGHT_FLOOR

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", AggregationFamily(self.family))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        validate_weight_set(self)

    @property
    def n_partitions(self) -> int:
        return int(self.weights.shape[0])

    @property
    def shape(self) -> tuple[int, ...]:
        """Per-partition weight shape: (d,) or (L, d)."""
        return tuple(self.weights.shape[1:])

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.weights)

    def as_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "family": str(self.family),
            "K": self.n_partitions,
            "d": int(self.weights.shape[-1]),
            "floor": self.floor,
            "weights": self.weights.tolist(),
        }
        if self.family is AggregationFamily.COMBINATORIAL:
            payload["L"] = int(self.weights.shape[1])
        if self.alignment is not None:
            payload["alignment"] = self.alignment.permutations.tolist()
        return payload

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> WeightSet:
        try:
            alignment = payload.get("alignment")
            weight_set = cls(
                family=AggregationFamily(payload["family"]),
                weights=np.asarray(payload["weights"], dtype=np.float64),
                alignment=None if alignment is None else Alignment(np.asarray(alignment)),
                floor=float(payload.get("floor", DEFAULT_WEIGHT_FLOOR)),
            )
        except (KeyError, ValueError, TypeError) as err:
            raise WeightSetError(f"malformed weight set: {err}") from err
        if weight_set.n_partitions != payload.get("K", weight_set.n_partitions):
            raise WeightSetError("weight set K does not match its weights")
        return weight_set


def validate_weight_set(weight_set: WeightSet) -> None:
    """Check shape, family, floor and simplex rules; raise WeightSetError."""
    w = weight_set.weights
    family = weight_set.family
    expected_ndim = 3 if family is AggregationFamily.COMBINATORIAL else 2
    if w.ndim != expected_ndim:
        raise WeightSetError(f"{family} weights need {expected_ndim} axes, got shape {w.shape}")
    if w.shape[0] < 1:
        raise WeightSetError("weight set needs at least one partition")
    if family is AggregationFamily.COMBINATORIAL:
        alignment = weight_set.alignment
        if alignment is None:
            raise WeightSetError("combinatorial weights need an alignment")
        if (alignment.n_partitions, alignment.n_clusters) != w.shape[:2]:
            raise WeightSetError(
                f"alignment shape {alignment.permutations.shape} does not match weights {w.shape}"
            )
    if not np.all(np.isfinite(w)):
        raise WeightSetError("weights must be finite")
    if w.min() < weight_set.floor:
        raise WeightSetError(f"weight {w.min():.3e} below floor {weight_set.floor:.1e}")
    worst = float(np.abs(w.sum(axis=0) - 1.0).max())
    if worst > SIMPLEX_TOLERANCE:
        raise WeightSetError(f"weights do not sum to one across partitions (off by {worst:.3e})")


def simplex_projection(values: Array, floor: float = 0.0) -> Array:
    """Euclidean projection of every K-column onto {v >= floor, sum v = 1}.

    Sort-and-threshold on the shifted simplex of radius 1 - K * floor; works on
    arrays of shape (K, ...) column by column.
    """
    values = np.asarray(values, dtype=np.float64)
    n_partitions = values.shape[0]
    if n_partitions * floor >= 1.0:
        raise WeightSetError(f"floor {floor} infeasible for K={n_partitions}")
    if not np.all(np.isfinite(values)):
        raise WeightSetError("cannot project non-finite weights")
    if n_partitions == 1:
        return np.ones_like(values)
    radius = 1.0 - n_partitions * floor
    shifted = values.reshape(n_partitions, -1) - floor
    ordered = -np.sort(-shifted, axis=0)
    excess = np.cumsum(ordered, axis=0) - radius
    ranks = np.arange(1, n_partitions + 1)[:, None]
    support = ordered - excess / ranks > 0
    rho = n_partitions - 1 - np.argmax(support[::-1], axis=0)
    threshold = excess[rho, np.arange(shifted.shape[1])] / (rho + 1)
    projected = np.maximum(shifted - threshold, 0.0) + floor
    return projected.reshape(values.shape)


def uniform_weights(
    n_partitions: int,
    shape: tuple[int, ...] | int,
    family: AggregationFamily = AggregationFamily.VECTOR,
    alignment: Alignment | None = None,
    floor: float = DEFAULT_WEIGHT_FLOOR,
) -> WeightSet:
    """Every entry 1/K."""
    family = AggregationFamily(family)
    if n_partitions < 1:
        raise WeightSetError(f"need K >= 1, got {n_partitions}")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if family is AggregationFamily.COMBINATORIAL and alignment is None:
        alignment = Alignment.identity(n_partitions, shape[0])
    weights = np.full((n_partitions, *shape), 1.0 / n_partitions)
    return WeightSet(family, weights, alignment, min(floor, 1.0 / n_partitions))


def _draws_of(samples: Any) -> Array:
    return np.asarray(getattr(samples, "draws", samples), dtype=np.float64)


def gaussian_weights(
    samples: Any,
    family: AggregationFamily | None = None,
    alignment: Alignment | None = None,
    floor: float = DEFAULT_WEIGHT_FLOOR,
) -> WeightSet:
    """Inverse-variance weights normalized per coordinate.

    Vector weights use the flattened parameters; spectral weights the canonical
    eigenvalues; combinatorial weights the aligned cluster centers.
    """
    draws = _draws_of(samples)
    if family is None:
        family = family_for_model(getattr(samples, "model_tag", ""))
    if draws.ndim < 3 or draws.shape[1] < 2:
        raise WeightSetError(f"Gaussian weights need >= 2 draws per partition, got shape {draws.shape}")
    n_partitions = draws.shape[0]

    if family is AggregationFamily.SPECTRAL:
        _, coords = canonical_eigendecomposition_batch(draws)
    elif family is AggregationFamily.COMBINATORIAL:
        if alignment is None:
            alignment = align_clusters(draws)
        coords = alignment.apply(draws)
    else:
        coords = draws.reshape(n_partitions, draws.shape[1], -1)

    variances = coords.var(axis=1, ddof=1) + VARIANCE_REGULARIZER
    precision = 1.0 / variances
    weights = precision / precision.sum(axis=0)
    if weights.min() < floor:
        _LOGGER.debug("Gaussian weights below floor %.1e; projecting", floor)
        weights = simplex_projection(weights, floor)
    return WeightSet(family, weights, alignment, floor)


@dataclass(frozen=True, eq=False)
class AggregatedSampleSet:
    """T aggregated draws with the provenance of the weights and samples used."""

    model_tag: str
    draws: Array
    weights_id: str
    samples_id: str
    algorithm: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(self.draws.shape[0])

    @property
    def param_shape(self) -> tuple[int, ...]:
        return tuple(self.draws.shape[1:])


def _check_family(weights: WeightSet, family: AggregationFamily) -> None:
    if weights.family is not family:
        raise WeightSetError(f"expected {family} weights, got {weights.family}")


def _combine(weights: Array, coords: Array) -> Array:
    """sum_k w_k * coords_k with weights (K, ...) broadcast over the draw axis."""
    return (weights[:, None, ...] * coords).sum(axis=0)


def _wrap(samples: Any, weights: WeightSet, draws: Array) -> AggregatedSampleSet:
    return AggregatedSampleSet(
        model_tag=getattr(samples, "model_tag", ""),
        draws=draws,
        weights_id=weights.fingerprint,
        samples_id=array_fingerprint(_draws_of(samples)),
    )


def aggregate_linear(weights: WeightSet, samples: Any) -> AggregatedSampleSet:
    """theta_t = sum_k w_k * theta_{k,t}, elementwise on the flattened parameter."""
    _check_family(weights, AggregationFamily.VECTOR)
    draws = _draws_of(samples)
    n_partitions, n_draws = draws.shape[:2]
    flat = draws.reshape(n_partitions, n_draws, -1)
    if weights.weights.shape != (n_partitions, flat.shape[2]):
        raise WeightSetError(
            f"weights of shape {weights.weights.shape} do not match samples of shape {draws.shape}"
        )
    if n_partitions == 1:
        return _wrap(samples, weights, draws[0].copy())
    combined = _combine(weights.weights, flat)
    return _wrap(samples, weights, combined.reshape(n_draws, *draws.shape[2:]))


def canonical_eigendecomposition_batch(matrices: Array) -> tuple[Array, Array]:
    """Canonical (R, D) for a stack of symmetric matrices of shape (..., d, d).

    Eigenvalues descend; each row of R has its first significant entry positive,
    so A = R' diag(D) R and the pair is a deterministic function of A.
    """
    matrices = np.asarray(matrices, dtype=np.float64)
    size = np.maximum(1.0, np.abs(matrices).max(axis=(-2, -1), initial=0.0))
    asym = np.abs(matrices - np.swapaxes(matrices, -1, -2)).max(axis=(-2, -1), initial=0.0)
    if np.any(asym > SYMMETRY_TOLERANCE * size):
        raise ModelDomainError(f"matrix is not symmetric (asymmetry {asym.max():.3e})")

    eigenvalues, eigenvectors = np.linalg.eigh(matrices)
    order = np.argsort(-eigenvalues, axis=-1, kind="stable")
    eigenvalues = np.take_along_axis(eigenvalues, order, axis=-1)
    eigenvectors = np.take_along_axis(eigenvectors, order[..., None, :], axis=-1)
    rotations = np.swapaxes(eigenvectors, -1, -2)

    first = np.argmax(np.abs(rotations) > EIGENVECTOR_SIGN_TOLERANCE, axis=-1)
    lead = np.take_along_axis(rotations, first[..., None], axis=-1)[..., 0]
    rotations = rotations * np.where(lead < 0, -1.0, 1.0)[..., None]
    return rotations, eigenvalues


def canonical_eigendecomposition(matrix: Array) -> tuple[Array, Array]:
    """Return (R, D) with matrix = R' diag(D) R and D sorted descending."""
    rotations, eigenvalues = canonical_eigendecomposition_batch(np.asarray(matrix)[None])
    return rotations[0], eigenvalues[0]


def spectral_reconstruct(weights: Array, rotations: Array, eigenvalues: Array) -> Array:
    """sum_k R_k' diag(w_k * D_k) R_k for rotations (K, ..., d, d) and eigenvalues (K, ..., d)."""
    scaled = weights.reshape(weights.shape[0], *([1] * (eigenvalues.ndim - 2)), -1) * eigenvalues
    combined = np.einsum("k...ji,k...j,k...jl->...il", rotations, scaled, rotations)
    return 0.5 * (combined + np.swapaxes(combined, -1, -2))


def aggregate_spectral(weights: WeightSet, samples: Any) -> AggregatedSampleSet:
    """Weighted recombination of canonical spectra; output stays PSD."""
    _check_family(weights, AggregationFamily.SPECTRAL)
    draws = _draws_of(samples)
    if draws.ndim != 4 or draws.shape[-1] != draws.shape[-2]:
        raise WeightSetError(f"spectral aggregation needs (K, T, d, d) draws, got {draws.shape}")
    n_partitions, _, d, _ = draws.shape
    if weights.weights.shape != (n_partitions, d):
        raise WeightSetError(
            f"weights of shape {weights.weights.shape} do not match samples of shape {draws.shape}"
        )
    rotations, eigenvalues = canonical_eigendecomposition_batch(draws)
    size = np.maximum(1.0, np.abs(eigenvalues).max())
    if eigenvalues.min() < -PSD_TOLERANCE * size:
        raise ModelDomainError(f"input matrix is not PSD (min eigenvalue {eigenvalues.min():.3e})")
    if n_partitions == 1:
        return _wrap(samples, weights, draws[0].copy())
    combined = spectral_reconstruct(weights.weights, rotations, np.clip(eigenvalues, 0.0, None))
    return _wrap(samples, weights, combined)


def cluster_means(samples: Any) -> Array:
    """Per-partition mean cluster centers, shape (K, L, d)."""
    draws = _draws_of(samples)
    if draws.ndim != 4 or draws.shape[1] == 0:
        raise WeightSetError(f"alignment needs nonempty (K, T, L, d) draws, got {draws.shape}")
    return draws.mean(axis=1)


def alignment_objective(means: Array, alignment: Alignment) -> float:
    """sum_k sum_l ||mean_{k, a_k[l]} - mean_{0, l}||^2."""
    aligned = np.stack([means[k][alignment.permutations[k]] for k in range(means.shape[0])])
    return float(np.sum((aligned - means[0][None]) ** 2))


def align_clusters(samples: Any) -> Alignment:
    """Match every partition's cluster labels to partition 0 with the Hungarian algorithm."""
    means = cluster_means(samples)
    n_partitions, n_clusters, _ = means.shape
    permutations = np.tile(np.arange(n_clusters), (n_partitions, 1))
    for k in range(1, n_partitions):
        cost = np.sum((means[k][None, :, :] - means[0][:, None, :]) ** 2, axis=-1)
        rows, cols = linear_sum_assignment(cost)
        permutations[k, rows] = cols
    alignment = Alignment(permutations)
    _LOGGER.debug(
        "Aligned %d partitions of %d clusters, objective %.4g",
        n_partitions, n_clusters, alignment_objective(means, alignment),
    )
    return alignment


def aggregate_combinatorial(weights: WeightSet, samples: Any) -> AggregatedSampleSet:
    """theta_{l,t} = sum_k w_kl * theta_{k, a_k[l], t}."""
    _check_family(weights, AggregationFamily.COMBINATORIAL)
    draws = _draws_of(samples)
    if draws.ndim != 4:
        raise WeightSetError(f"combinatorial aggregation needs (K, T, L, d) draws, got {draws.shape}")
    n_partitions, _, n_clusters, d = draws.shape
    if weights.weights.shape != (n_partitions, n_clusters, d):
        raise WeightSetError(
            f"weights of shape {weights.weights.shape} do not match samples of shape {draws.shape}"
        )
    alignment = weights.alignment
    assert alignment is not None
    if n_partitions == 1:
        return _wrap(samples, weights, draws[0].copy())
    return _wrap(samples, weights, _combine(weights.weights, alignment.apply(draws)))


def aggregate(weights: WeightSet, samples: Any) -> AggregatedSampleSet:
    """Dispatch on the weight family."""
    if weights.family is AggregationFamily.SPECTRAL:
        return aggregate_spectral(weights, samples)
    if weights.family is AggregationFamily.COMBINATORIAL:
        return aggregate_combinatorial(weights, samples)
    return aggregate_linear(weights, samples)
