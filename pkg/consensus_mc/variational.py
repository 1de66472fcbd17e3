"""Relaxed variational objective, its gradients, and the projected SGD optimizer.

The objective of a weight set W is

    E_q[log p(theta, X)] + H~(W)

where q is the law of the aggregated draw F_W(theta_1, ..., theta_K) under
independent subposteriors and H~ is the relaxed entropy (the subposterior
entropies are constant in W and are dropped). Expectations over q are Monte
Carlo averages over a batch of B index-aligned K-tuples of draws.

All objective and gradient functions accept raw weight arrays as well as
``WeightSet`` instances, so they can be evaluated off the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum
import logging
import time
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.special import log_ndtr, logsumexp

from .aggregation import (
    AggregationFamily,
    Alignment,
    WeightSet,
    align_clusters,
    canonical_eigendecomposition_batch,
    family_for_model,
    simplex_projection,
    spectral_reconstruct,
    uniform_weights,
)
from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_OPT_ITERATIONS,
    DEFAULT_STEP_A,
    DEFAULT_STEP_B,
    DEFAULT_WEIGHT_FLOOR,
    MODEL_MIXTURE,
    MODEL_NIW,
    MODEL_PROBIT,
    PROBIT_CDF_CLAMP,
    SINGULAR_CONDITION,
)
from .exceptions import ConfigError, ModelDomainError, OptimizationError, WeightSetError
from .models import MixtureSpec, ModelSpec, NIWSpec, ProbitSpec, SubposteriorMoments, compute_moments

_LOGGER = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_SATURATION = float(np.log(PROBIT_CDF_CLAMP))

Array = NDArray[np.float64]


class EntropyMode(StrEnum):
    """Mean of the per-partition log-Jacobians, or their max."""

    RELAXED_MEAN = "relaxed_mean"
    RELAXED_MAX = "relaxed_max"


class MixtureGradient(StrEnum):
    EXACT = "exact"
    DIAGONAL = "diagonal"


@dataclass(frozen=True)
class ObjectiveConfig:
    """Entropy relaxation, batch size, iteration count and step schedule."""

    entropy: EntropyMode = EntropyMode.RELAXED_MEAN
    batch_size: int = DEFAULT_BATCH_SIZE
    iterations: int = DEFAULT_OPT_ITERATIONS
    step_a: float = DEFAULT_STEP_A
    step_b: float = DEFAULT_STEP_B
    floor: float = DEFAULT_WEIGHT_FLOOR
    mixture_gradient: MixtureGradient = MixtureGradient.EXACT

    def __post_init__(self) -> None:
        object.__setattr__(self, "entropy", EntropyMode(self.entropy))
        object.__setattr__(self, "mixture_gradient", MixtureGradient(self.mixture_gradient))
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError(f"iteration count must be >= 0, got {self.iterations}")
        if not self.step_a > 0 or self.step_b < 0:
            raise ConfigError(f"step schedule needs a > 0 and b >= 0, got a={self.step_a}, b={self.step_b}")
        if not 0.0 <= self.floor < 1.0:
            raise ConfigError(f"weight floor must lie in [0, 1), got {self.floor}")

    def step_size(self, iteration: int) -> float:
        """Step a / (b + t) with t = iteration + 1, so b = 0 is usable."""
        return self.step_a / (self.step_b + iteration + 1)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    objective: float
    grad_norm: float
    step: float
    seconds: float


@dataclass
class OptimizerTrace:
    """One row per optimizer iteration."""

    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    @property
    def objectives(self) -> Array:
        return np.array([row.objective for row in self.rows])


def _weights(weights: WeightSet | Array) -> Array:
    return np.asarray(getattr(weights, "weights", weights), dtype=np.float64)


# Entropy


def _log_jacobians(w: Array) -> Array:
    if np.any(w <= 0):
        raise WeightSetError("relaxed entropy needs strictly positive weights")
    return np.log(w).reshape(w.shape[0], -1).sum(axis=1)


def relaxed_entropy(
    weights: WeightSet | Array, mode: EntropyMode = EntropyMode.RELAXED_MEAN
) -> float:
    """Relaxed entropy of a diagonal linear aggregation, without the min_k H[p_k] constant."""
    per_partition = _log_jacobians(_weights(weights))
    if mode is EntropyMode.RELAXED_MAX:
        return float(per_partition.max())
    return float(per_partition.mean())


def relaxed_entropy_gradient(
    weights: WeightSet | Array, mode: EntropyMode = EntropyMode.RELAXED_MEAN
) -> Array:
    """Gradient of ``relaxed_entropy``; a subgradient in max mode."""
    w = _weights(weights)
    per_partition = _log_jacobians(w)
    if mode is EntropyMode.RELAXED_MAX:
        grad = np.zeros_like(w)
        best = int(np.argmax(per_partition))
        grad[best] = 1.0 / w[best]
        return grad
    return (1.0 / w.shape[0]) / w


def gaussian_entropy(covariance: Array) -> float:
    """Differential entropy 0.5 log det(2 pi e Sigma) of a Gaussian."""
    covariance = np.atleast_2d(np.asarray(covariance, dtype=np.float64))
    sign, logdet = np.linalg.slogdet(covariance)
    if sign <= 0:
        raise ModelDomainError("covariance must be positive definite")
    return float(0.5 * (covariance.shape[0] * (1.0 + _LOG_2PI) + logdet))


# Probit


def _probit_prior_term(w: Array, moments: SubposteriorMoments, sigma2: float) -> tuple[float, Array]:
    means = moments.means
    diag_second = np.diagonal(moments.second_moments, axis1=1, axis2=2)
    weighted_means = w * means
    total = weighted_means.sum(axis=0)
    expected_sq = (
        np.sum(diag_second * w * w) + total @ total - np.sum(weighted_means * weighted_means)
    )
    d = w.shape[1]
    value = -expected_sq / (2.0 * sigma2) - 0.5 * d * (_LOG_2PI + np.log(sigma2))
    grad = -(diag_second * w + means * (total[None, :] - weighted_means)) / sigma2
    return float(value), grad


def _probit_scores(eta: Array, y: Array) -> tuple[Array, Array]:
    """Log-likelihood terms and d/d eta of them, both evaluated in log space."""
    positive = (y == 1)[:, None]
    log_cdf = log_ndtr(np.where(positive, eta, -eta))
    log_pdf = -0.5 * eta * eta - 0.5 * _LOG_2PI
    ratio = np.exp(log_pdf - log_cdf)
    score = np.where(positive, ratio, -ratio)
    saturated = int(np.count_nonzero(log_cdf < _LOG_SATURATION) + np.count_nonzero(
        log_ndtr(np.where(positive, -eta, eta)) < _LOG_SATURATION
    ))
    if saturated:
        _LOGGER.debug("Probit CDF saturated at %d of %d entries", saturated, eta.size)
    return log_cdf, score


def _probit_batch(w: Array, batch: Array) -> Array:
    if batch.ndim != 3 or batch.shape[1] == 0:
        raise OptimizationError(f"probit batch needs shape (K, B, d) with B >= 1, got {batch.shape}")
    return np.einsum("kd,kbd->bd", w, batch)


def objective_probit(
    weights: WeightSet | Array,
    moments: SubposteriorMoments,
    batch: Array,
    model: ProbitSpec,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
) -> float:
    w = _weights(weights)
    prior, _ = _probit_prior_term(w, moments, model.sigma2)
    beta = _probit_batch(w, batch)
    likelihood = 0.0
    if model.n_obs:
        log_cdf, _ = _probit_scores(model.x @ beta.T, model.y)
        likelihood = float(log_cdf.sum(axis=0).mean())
    return prior + likelihood + relaxed_entropy(w, entropy)


def grad_probit(
    weights: WeightSet | Array,
    moments: SubposteriorMoments,
    batch: Array,
    model: ProbitSpec,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
) -> Array:
    """Diagonal gradient of the probit objective.

    The prior expectation is exact given the subposterior moments; the data
    term is averaged over the batch.
    """
    w = _weights(weights)
    _, grad = _probit_prior_term(w, moments, model.sigma2)
    beta = _probit_batch(w, batch)
    if model.n_obs:
        _, score = _probit_scores(model.x @ beta.T, model.y)
        weighted_x = model.x.T @ score
        grad = grad + np.einsum("db,kbd->kd", weighted_x, batch) / batch.shape[1]
    return grad + relaxed_entropy_gradient(w, entropy)


# Normal / Wishart


@dataclass(frozen=True, eq=False)
class SpectralBatch:
    """Canonical eigendecompositions of (K, B, d, d) precision draws."""

    rotations: Array
    eigenvalues: Array

    @classmethod
    def from_draws(cls, draws: Array) -> SpectralBatch:
        rotations, eigenvalues = canonical_eigendecomposition_batch(draws)
        return cls(rotations, eigenvalues)

    @property
    def size(self) -> int:
        return int(self.eigenvalues.shape[1])

    def take(self, indices: NDArray[np.int64]) -> SpectralBatch:
        return SpectralBatch(self.rotations[:, indices], self.eigenvalues[:, indices])


def _niw_aggregate(w: Array, batch: SpectralBatch) -> Array:
    if batch.size == 0:
        raise OptimizationError("NIW batch is empty")
    combined = spectral_reconstruct(w, batch.rotations, batch.eigenvalues)
    condition = np.linalg.cond(combined)
    worst = float(np.max(condition))
    if not worst <= SINGULAR_CONDITION:
        raise OptimizationError(
            f"aggregated precision is singular (condition number {worst:.3e} > {SINGULAR_CONDITION:.0e})"
        )
    return combined


def objective_niw(
    weights: WeightSet | Array,
    batch: SpectralBatch,
    model: NIWSpec,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
) -> float:
    w = _weights(weights)
    combined = _niw_aggregate(w, batch)
    values = [model.log_prior(lam) + model.log_likelihood(lam) for lam in combined]
    return float(np.mean(values)) + relaxed_entropy(w, entropy)


def grad_niw(
    weights: WeightSet | Array,
    batch: SpectralBatch,
    model: NIWSpec,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
) -> Array:
    """Diagonal gradient with respect to the spectral weights.

    With M = V^-1 + sum (x - mu)(x - mu)' and c = (nu + N - d - 1) / 2,
    dL/dw_kj = D_kj [c (R_k Lambda^-1 R_k')_jj - (R_k M R_k')_jj / 2].
    """
    w = _weights(weights)
    combined = _niw_aggregate(w, batch)
    inverse = np.linalg.inv(combined)
    quadratic = model.scale_inv + model.scatter()
    coefficient = 0.5 * (model.nu + model.n_obs - model.dim - 1)
    rot = batch.rotations
    trace_term = np.einsum("kbji,il,kbjl->kbj", rot, quadratic, rot)
    logdet_term = np.einsum("kbji,bil,kbjl->kbj", rot, inverse, rot)
    grad = np.mean(batch.eigenvalues * (coefficient * logdet_term - 0.5 * trace_term), axis=1)
    return grad + relaxed_entropy_gradient(w, entropy)


# Mixture of Gaussians


def _mog_aggregate(w: Array, batch: Array) -> Array:
    if batch.ndim != 4 or batch.shape[1] == 0:
        raise OptimizationError(f"mixture batch needs shape (K, B, L, d) with B >= 1, got {batch.shape}")
    return np.einsum("kld,kbld->bld", w, batch)


def _mog_terms(centers: Array, model: MixtureSpec) -> tuple[Array, Array, Array]:
    """Squared distances e (B, N, L), responsibilities gamma and residuals theta* - x."""
    residual = centers[:, None, :, :] - model.x[None, :, None, :]
    distances = np.sum(residual * residual, axis=-1)
    logits = model.log_weights[None, None, :] - distances / (2.0 * model.sigma2)
    gamma = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    return distances, gamma, residual


def objective_mog(
    weights: WeightSet | Array,
    batch: Array,
    model: MixtureSpec,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
) -> float:
    """Batch mean of -|theta*|^2 / (2 tau2) - sum_n sum_l gamma_nl e_nl / (2 sigma2), plus entropy.

    ``batch`` holds aligned draws (K, B, L, d).
    """
    w = _weights(weights)
    centers = _mog_aggregate(w, batch)
    value = -np.sum(centers * centers, axis=(1, 2)) / (2.0 * model.tau2)
    if model.n_obs:
        distances, gamma, _ = _mog_terms(centers, model)
        value = value - np.sum(gamma * distances, axis=(1, 2)) / (2.0 * model.sigma2)
    return float(value.mean()) + relaxed_entropy(w, entropy)


def grad_mog(
    weights: WeightSet | Array,
    batch: Array,
    model: MixtureSpec,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
    variant: MixtureGradient = MixtureGradient.EXACT,
) -> Array:
    """Diagonal gradient of ``objective_mog`` with respect to w_kl.

    The exact variant differentiates through the responsibilities, which
    weights each distance by (e_nl - sum_m gamma_nm e_nm). The diagonal variant
    uses (1 - gamma_nl) e_nl instead; the two agree when L = 1 or assignments
    are hard.
    """
    w = _weights(weights)
    centers = _mog_aggregate(w, batch)
    grad_centers = -centers / model.tau2
    if model.n_obs:
        distances, gamma, residual = _mog_terms(centers, model)
        if MixtureGradient(variant) is MixtureGradient.EXACT:
            spread = distances - np.sum(gamma * distances, axis=-1, keepdims=True)
        else:
            spread = (1.0 - gamma) * distances
        sigma4 = model.sigma2 * model.sigma2
        grad_centers = (
            grad_centers
            + np.einsum("bnl,bnld->bld", gamma * spread, residual) / (2.0 * sigma4)
            - np.einsum("bnl,bnld->bld", gamma, residual) / model.sigma2
        )
    grad = np.einsum("kbld,bld->kld", batch, grad_centers) / batch.shape[1]
    return grad + relaxed_entropy_gradient(w, entropy)


# Projection and optimization


def project_weights(
    raw: Array,
    family: AggregationFamily = AggregationFamily.VECTOR,
    floor: float = DEFAULT_WEIGHT_FLOOR,
    alignment: Alignment | None = None,
) -> WeightSet:
    """Project raw weights onto the floored simplex, coordinate by coordinate."""
    return WeightSet(family, simplex_projection(raw, floor), alignment, floor)


@dataclass(frozen=True, eq=False)
class _Problem:
    """Per-model objective/gradient closures over precomputed draw summaries."""

    model: ModelSpec
    family: AggregationFamily
    draws: Any
    moments: SubposteriorMoments | None
    alignment: Alignment | None
    cfg: ObjectiveConfig

    @property
    def n_draws(self) -> int:
        return self.draws.size if isinstance(self.draws, SpectralBatch) else int(self.draws.shape[1])

    def batch(self, indices: NDArray[np.int64]) -> Any:
        if isinstance(self.draws, SpectralBatch):
            return self.draws.take(indices)
        return self.draws[:, indices]

    def value(self, w: Array, batch: Any) -> float:
        return estimate_objective(
            self.model, w, batch, moments=self.moments, entropy=self.cfg.entropy
        )

    def gradient(self, w: Array, batch: Any) -> Array:
        return objective_gradient(
            self.model, w, batch, moments=self.moments,
            entropy=self.cfg.entropy, variant=self.cfg.mixture_gradient,
        )


def estimate_objective(
    model: ModelSpec,
    weights: WeightSet | Array,
    batch: Any,
    moments: SubposteriorMoments | None = None,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
) -> float:
    """Monte Carlo estimate of the relaxed objective on one batch.

    Probit batches are (K, B, d) draws; ``moments`` default to the batch's own,
    which makes the prior term a plain batch average. NIW batches are
    ``SpectralBatch`` or (K, B, d, d) draws; mixture batches are aligned
    (K, B, L, d) draws.
    """
    if isinstance(model, ProbitSpec):
        batch = np.asarray(batch, dtype=np.float64)
        if moments is None:
            moments = compute_moments(batch)
        return objective_probit(weights, moments, batch, model, entropy)
    if isinstance(model, NIWSpec):
        if not isinstance(batch, SpectralBatch):
            batch = SpectralBatch.from_draws(batch)
        return objective_niw(weights, batch, model, entropy)
    if isinstance(model, MixtureSpec):
        return objective_mog(weights, np.asarray(batch, dtype=np.float64), model, entropy)
    raise ModelDomainError(f"no objective for model '{model.tag}'")


def objective_gradient(
    model: ModelSpec,
    weights: WeightSet | Array,
    batch: Any,
    moments: SubposteriorMoments | None = None,
    entropy: EntropyMode = EntropyMode.RELAXED_MEAN,
    variant: MixtureGradient = MixtureGradient.EXACT,
) -> Array:
    """Gradient of ``estimate_objective`` with respect to the weights."""
    if isinstance(model, ProbitSpec):
        batch = np.asarray(batch, dtype=np.float64)
        if moments is None:
            moments = compute_moments(batch)
        return grad_probit(weights, moments, batch, model, entropy)
    if isinstance(model, NIWSpec):
        if not isinstance(batch, SpectralBatch):
            batch = SpectralBatch.from_draws(batch)
        return grad_niw(weights, batch, model, entropy)
    if isinstance(model, MixtureSpec):
        return grad_mog(weights, np.asarray(batch, dtype=np.float64), model, entropy, variant)
    raise ModelDomainError(f"no gradient for model '{model.tag}'")


def _prepare(
    model: ModelSpec, samples: Any, cfg: ObjectiveConfig, alignment: Alignment | None
) -> _Problem:
    draws = np.asarray(getattr(samples, "draws", samples), dtype=np.float64)
    if draws.ndim < 3 or draws.shape[1] == 0:
        raise OptimizationError(f"optimization needs nonempty (K, T, ...) draws, got {draws.shape}")
    family = family_for_model(model.tag)
    moments = None
    summary: Any = draws
    if model.tag == MODEL_PROBIT:
        moments = compute_moments(draws)
    elif model.tag == MODEL_NIW:
        summary = SpectralBatch.from_draws(draws)
    elif model.tag == MODEL_MIXTURE:
        alignment = alignment if alignment is not None else align_clusters(draws)
        summary = alignment.apply(draws)
    return _Problem(model, family, summary, moments, alignment, cfg)


def optimize(
    model: ModelSpec,
    samples: Any,
    cfg: ObjectiveConfig,
    seed: int,
    alignment: Alignment | None = None,
) -> tuple[WeightSet, OptimizerTrace]:
    """Projected stochastic gradient ascent from uniform weights.

    Each iteration takes B aligned draw tuples without replacement (reshuffled
    per epoch), steps by a / (b + t) with t counted from 1 along the
    per-observation gradient and projects back onto the floored simplex. The
    gradient is divided by max(N, 1), so the effective step on the raw
    gradient is a / (N (b + t)).
    """
    problem = _prepare(model, samples, cfg, alignment)
    n_partitions = int(np.shape(getattr(samples, "draws", samples))[0])
    if problem.alignment is not None:
        shape: tuple[int, ...] = (problem.alignment.n_clusters, model.dim)
    else:
        shape = (model.dim,)
    start = uniform_weights(n_partitions, shape, problem.family, problem.alignment, cfg.floor)
    floor = start.floor
    w = start.weights

    rng = np.random.default_rng(seed)
    n_draws = problem.n_draws
    batch_size = min(cfg.batch_size, n_draws)
    if batch_size < cfg.batch_size:
        _LOGGER.warning("Batch size %d exceeds %d available draws", cfg.batch_size, n_draws)
    order = rng.permutation(n_draws)
    cursor = 0
    scale = 1.0 / max(model.n_obs, 1)

    trace = OptimizerTrace()
    started = time.perf_counter()
    for iteration in range(cfg.iterations):
        if cursor + batch_size > n_draws:
            order = rng.permutation(n_draws)
            cursor = 0
        batch = problem.batch(np.sort(order[cursor:cursor + batch_size]))
        cursor += batch_size

        try:
            grad = problem.gradient(w, batch)
            objective = problem.value(w, batch)
        except OptimizationError as err:
            raise OptimizationError(str(err), trace) from err
        if not np.all(np.isfinite(grad)):
            raise OptimizationError(f"non-finite gradient at iteration {iteration}", trace)

        step = cfg.step_size(iteration)
        w = simplex_projection(w + step * scale * grad, floor)
        trace.append(TraceRow(
            iteration=iteration,
            objective=objective,
            grad_norm=float(np.linalg.norm(grad)),
            step=step,
            seconds=time.perf_counter() - started,
        ))
        _LOGGER.debug("Iteration %d: objective %.6g, |grad| %.3g", iteration, objective, trace.rows[-1].grad_norm)

    return WeightSet(problem.family, w, problem.alignment, floor), trace
