"""Probabilistic models: log densities, tempering and subposterior moments.

Three models are supported, each a frozen record holding its data and fixed
hyperparameters:

* ``ProbitSpec``  - Bayesian probit regression, parameter beta in R^d.
* ``NIWSpec``     - Gaussian data with Wishart prior on the precision, mean
  point-estimated, parameter Lambda in S^d_+.
* ``MixtureSpec`` - isotropic Gaussian mixture with known weights and
  variances, parameter theta in R^{L x d}; Z_n marginalized.

Normalizing constants are included wherever they are closed form (Gaussian
and Wishart normalizers). Nothing is dropped for the three models, so
``log_joint`` is exact and the tempered partition densities sum to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import StrEnum
import logging
from typing import TYPE_CHECKING, Any, ClassVar, Protocol

import numpy as np
from numpy.typing import NDArray
from scipy.special import log_ndtr, logsumexp, multigammaln

from .const import (
    MODE_PARTIAL,
    MODE_SUBPOSTERIOR,
    MODEL_MIXTURE,
    MODEL_NIW,
    MODEL_PROBIT,
    PSD_TOLERANCE,
    SYMMETRY_TOLERANCE,
)
from .exceptions import ModelDomainError

if TYPE_CHECKING:
    from .samplers import DataPartition

_LOGGER = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))

Array = NDArray[np.float64]


class TemperingKind(StrEnum):
    """How the prior enters a partition-level density."""

    SUBPOSTERIOR = MODE_SUBPOSTERIOR
    PARTIAL_POSTERIOR = MODE_PARTIAL


@dataclass(frozen=True)
class TemperingMode:
    """Subposterior(K) raises the prior to 1/K; PartialPosterior keeps it whole."""

    kind: TemperingKind = TemperingKind.SUBPOSTERIOR
    k: int = 1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ModelDomainError(f"tempering needs K >= 1, got {self.k}")

    @classmethod
    def subposterior(cls, k: int) -> TemperingMode:
        return cls(TemperingKind.SUBPOSTERIOR, k)

    @classmethod
    def partial_posterior(cls, k: int = 1) -> TemperingMode:
        return cls(TemperingKind.PARTIAL_POSTERIOR, k)

    @property
    def prior_power(self) -> float:
        """Exponent applied to the prior density."""
        if self.kind is TemperingKind.SUBPOSTERIOR:
            return 1.0 / self.k
        return 1.0

    def with_k(self, k: int) -> TemperingMode:
        return replace(self, k=k)


class _HasIndices(Protocol):
    indices: NDArray[np.int64]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Base record: data matrix plus the interface every model implements."""

    tag: ClassVar[str] = ""

    x: Array

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ModelDomainError(f"data must be a 2-D array, got shape {x.shape}")
        object.__setattr__(self, "x", x)

    @property
    def n_obs(self) -> int:
        return int(self.x.shape[0])

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    @property
    def param_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    def log_prior(self, theta: Array) -> float:
        raise NotImplementedError

    def log_likelihood(self, theta: Array, indices: NDArray[np.int64] | None = None) -> float:
        raise NotImplementedError

    def subset(self, indices: NDArray[np.int64]) -> ModelSpec:
        """Return the same model restricted to the given data rows."""
        return replace(self, x=self.x[indices])

    def prior_mean(self, mode: TemperingMode) -> Array:
        """Mean of the (tempered) prior, used to initialize chains."""
        raise NotImplementedError

    def _check_shape(self, theta: Array) -> Array:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.param_shape:
            raise ModelDomainError(
                f"{self.tag}: parameter shape {theta.shape} != expected {self.param_shape}"
            )
        return theta

    def _rows(self, indices: NDArray[np.int64] | None) -> Array:
        return self.x if indices is None else self.x[indices]


@dataclass(frozen=True, eq=False)
class ProbitSpec(ModelSpec):
    """Probit regression: beta ~ N(0, sigma2 I), y_n ~ Bernoulli(Phi(beta' x_n))."""

    tag: ClassVar[str] = MODEL_PROBIT

    y: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sigma2: float = 1.0

    def __post_init__(self) -> None:
        super().__post_init__()
        y = np.asarray(self.y).astype(np.int64).reshape(-1)
        if y.shape[0] != self.n_obs:
            raise ModelDomainError(f"probit: {y.shape[0]} labels for {self.n_obs} rows")
        if np.any((y != 0) & (y != 1)):
            raise ModelDomainError("probit: labels must be 0 or 1")
        if not self.sigma2 > 0:
            raise ModelDomainError(f"probit: prior variance must be positive, got {self.sigma2}")
        object.__setattr__(self, "y", y)

    @property
    def param_shape(self) -> tuple[int, ...]:
        return (self.dim,)

    def subset(self, indices: NDArray[np.int64]) -> ProbitSpec:
        return replace(self, x=self.x[indices], y=self.y[indices])

    def prior_mean(self, mode: TemperingMode) -> Array:
        return np.zeros(self.param_shape)

    def log_prior(self, theta: Array) -> float:
        beta = self._check_shape(theta)
        return float(
            -0.5 * self.dim * (_LOG_2PI + np.log(self.sigma2)) - beta @ beta / (2.0 * self.sigma2)
        )

    def log_likelihood(self, theta: Array, indices: NDArray[np.int64] | None = None) -> float:
        beta = self._check_shape(theta)
        rows = self._rows(indices)
        if rows.shape[0] == 0:
            return 0.0
        labels = self.y if indices is None else self.y[indices]
        eta = rows @ beta
        # log(1 - Phi(eta)) == log Phi(-eta)
        return float(np.where(labels == 1, log_ndtr(eta), log_ndtr(-eta)).sum())


@dataclass(frozen=True, eq=False)
class NIWSpec(ModelSpec):
    """Precision Lambda ~ Wishart(nu, V); x_n ~ N(mu, Lambda^-1) with mu fixed."""

    tag: ClassVar[str] = MODEL_NIW

    nu: float = 0.0
    scale: Array = field(default_factory=lambda: np.zeros((0, 0)))
    mu: Array | None = None

    def __post_init__(self) -> None:
        super().__post_init__()
        d = self.dim
        scale = np.asarray(self.scale, dtype=np.float64)
        if scale.shape != (d, d):
            raise ModelDomainError(f"niw: scale matrix shape {scale.shape} != {(d, d)}")
        if not np.allclose(scale, scale.T, atol=SYMMETRY_TOLERANCE):
            raise ModelDomainError("niw: scale matrix must be symmetric")
        eigenvalues = np.linalg.eigvalsh(scale)
        if eigenvalues.min() <= 0:
            raise ModelDomainError("niw: scale matrix must be positive definite")
        if not self.nu > d - 1:
            raise ModelDomainError(f"niw: degrees of freedom {self.nu} must exceed d-1={d - 1}")
        if self.mu is None:
            mu = self.x.mean(axis=0) if self.n_obs else np.zeros(d)
        else:
            mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
            if mu.shape != (d,):
                raise ModelDomainError(f"niw: mean shape {mu.shape} != {(d,)}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "mu", mu)

    @property
    def param_shape(self) -> tuple[int, ...]:
        return (self.dim, self.dim)

    @property
    def scale_inv(self) -> Array:
        return np.linalg.inv(self.scale)

    def scatter(self, indices: NDArray[np.int64] | None = None) -> Array:
        """Sum of (x_n - mu)(x_n - mu)^T over the selected rows."""
        centered = self._rows(indices) - self.mu
        return centered.T @ centered

    def tempered_prior(self, mode: TemperingMode) -> tuple[float, Array]:
        """Wishart parameters of the prior raised to ``mode.prior_power``.

        Wishart(nu, V)^(1/K) is proportional to |L|^((nu-d-1)/(2K)) exp(-tr(V^-1 L)/(2K)),
        which is Wishart((nu-d-1)/K + d + 1, K V).
        """
        if mode.kind is TemperingKind.PARTIAL_POSTERIOR or mode.k == 1:
            return float(self.nu), self.scale
        d = self.dim
        return (self.nu - d - 1) / mode.k + d + 1, mode.k * self.scale

    def prior_mean(self, mode: TemperingMode) -> Array:
        nu, scale = self.tempered_prior(mode)
        return nu * scale

    def check_precision(self, theta: Array) -> tuple[Array, float]:
        """Validate a precision matrix; return it with its log determinant."""
        lam = self._check_shape(theta)
        size = max(1.0, float(np.abs(lam).max()))
        if np.abs(lam - lam.T).max() > SYMMETRY_TOLERANCE * size:
            raise ModelDomainError("niw: precision matrix is not symmetric")
        min_eig = float(np.linalg.eigvalsh(lam).min())
        if min_eig < -PSD_TOLERANCE * size:
            raise ModelDomainError(f"niw: precision matrix is not PSD (min eigenvalue {min_eig:.3e})")
        sign, logdet = np.linalg.slogdet(lam)
        if sign <= 0:
            return lam, -np.inf
        return lam, float(logdet)

    def wishart_log_density(self, lam: Array, logdet: float, nu: float, scale: Array) -> float:
        d = self.dim
        _, logdet_scale = np.linalg.slogdet(scale)
        trace = float(np.trace(np.linalg.solve(scale, lam)))
        return float(
            0.5 * (nu - d - 1) * logdet
            - 0.5 * trace
            - 0.5 * nu * d * np.log(2.0)
            - 0.5 * nu * logdet_scale
            - multigammaln(0.5 * nu, d)
        )

    def log_prior(self, theta: Array) -> float:
        lam, logdet = self.check_precision(theta)
        if not np.isfinite(logdet):
            return -np.inf
        return self.wishart_log_density(lam, logdet, float(self.nu), self.scale)

    def log_likelihood(self, theta: Array, indices: NDArray[np.int64] | None = None) -> float:
        lam, logdet = self.check_precision(theta)
        n = self._rows(indices).shape[0]
        if n == 0:
            return 0.0
        if not np.isfinite(logdet):
            return -np.inf
        scatter = self.scatter(indices)
        return float(0.5 * n * logdet - 0.5 * n * self.dim * _LOG_2PI - 0.5 * np.sum(scatter * lam))


@dataclass(frozen=True, eq=False)
class MixtureSpec(ModelSpec):
    """theta_l ~ N(0, tau2 I); x_n ~ sum_l pi_l N(theta_l, sigma2 I)."""

    tag: ClassVar[str] = MODEL_MIXTURE

    n_clusters: int = 1
    tau2: float = 1.0
    sigma2: float = 1.0
    weights: Array | None = None

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.n_clusters < 1:
            raise ModelDomainError(f"mixture: need at least one cluster, got {self.n_clusters}")
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise ModelDomainError("mixture: variances must be positive")
        if self.weights is None:
            weights = np.full(self.n_clusters, 1.0 / self.n_clusters)
        else:
            weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.shape != (self.n_clusters,):
            raise ModelDomainError(f"mixture: {weights.shape[0]} weights for {self.n_clusters} clusters")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ModelDomainError("mixture: weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", weights)

    @property
    def param_shape(self) -> tuple[int, ...]:
        return (self.n_clusters, self.dim)

    @property
    def log_weights(self) -> Array:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def prior_mean(self, mode: TemperingMode) -> Array:
        return np.zeros(self.param_shape)

    def log_prior(self, theta: Array) -> float:
        centers = self._check_shape(theta)
        return float(
            -0.5 * centers.size * (_LOG_2PI + np.log(self.tau2))
            - np.sum(centers**2) / (2.0 * self.tau2)
        )

    def component_log_densities(self, centers: Array, rows: Array) -> Array:
        """log pi_l + log N(x_n; theta_l, sigma2 I), shape (N, L)."""
        sq = np.sum((rows[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        return (
            self.log_weights[None, :]
            - 0.5 * self.dim * (_LOG_2PI + np.log(self.sigma2))
            - sq / (2.0 * self.sigma2)
        )

    def responsibilities(self, centers: Array, rows: Array) -> Array:
        """Posterior cluster probabilities of each row, shape (N, L)."""
        logp = self.component_log_densities(centers, rows)
        return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))

    def log_likelihood(self, theta: Array, indices: NDArray[np.int64] | None = None) -> float:
        centers = self._check_shape(theta)
        rows = self._rows(indices)
        if rows.shape[0] == 0:
            return 0.0
        return float(logsumexp(self.component_log_densities(centers, rows), axis=1).sum())

    def grad_log_density(
        self, theta: Array, indices: NDArray[np.int64] | None = None, prior_power: float = 1.0
    ) -> Array:
        """Gradient of log p(X_I | theta) + prior_power * log p(theta)."""
        centers = self._check_shape(theta)
        grad = -prior_power * centers / self.tau2
        rows = self._rows(indices)
        if rows.shape[0]:
            resp = self.responsibilities(centers, rows)
            grad = grad + (resp.T @ rows - resp.sum(axis=0)[:, None] * centers) / self.sigma2
        return grad


def log_joint(model: ModelSpec, theta: Array) -> float:
    """log p(theta) + sum_n log p(x_n | theta)."""
    return model.log_prior(theta) + model.log_likelihood(theta)


def partition_log_density(
    model: ModelSpec,
    partition_index: int,
    partition: DataPartition | _HasIndices,
    theta: Array,
    mode: TemperingMode,
) -> float:
    """Tempered log density of one data partition.

    Subposterior(K) gives log p(X_I | theta) + log p(theta) / K, so the K
    partition densities of a disjoint cover sum to ``log_joint``.
    PartialPosterior keeps the whole prior.
    """
    indices = np.asarray(partition.indices, dtype=np.int64)
    _LOGGER.debug(
        "Partition %d log density over %d rows (%s)", partition_index, indices.size, mode.kind
    )
    return model.log_likelihood(theta, indices) + mode.prior_power * model.log_prior(theta)


@dataclass(frozen=True, eq=False)
class SubposteriorMoments:
    """Per-partition mean mu_k and (uncentered) second moment S_k of flattened draws."""

    means: Array
    second_moments: Array

    @property
    def n_partitions(self) -> int:
        return int(self.means.shape[0])

    def covariances(self) -> Array:
        return self.second_moments - np.einsum("ki,kj->kij", self.means, self.means)

    def is_valid(self, tolerance: float = 1e-9) -> bool:
        """S_k - mu_k mu_k^T is PSD up to ``tolerance``."""
        covs = self.covariances()
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        return bool(np.linalg.eigvalsh(covs).min() >= -tolerance)


def compute_moments(samples: Any) -> SubposteriorMoments:
    """Compute mu_k and S_k for every partition of a sample set.

    Accepts a ``SubposteriorSampleSet`` or a raw array of shape (K, T, ...).
    """
    draws = np.asarray(getattr(samples, "draws", samples), dtype=np.float64)
    if draws.ndim < 2:
        raise ModelDomainError(f"expected draws of shape (K, T, ...), got {draws.shape}")
    if draws.shape[1] < 2:
        raise ModelDomainError(f"moments need at least 2 samples per partition, got {draws.shape[1]}")
    flat = draws.reshape(draws.shape[0], draws.shape[1], -1)
    means = flat.mean(axis=1)
    second = np.einsum("kti,ktj->kij", flat, flat) / flat.shape[1]
    return SubposteriorMoments(means=means, second_moments=second)
