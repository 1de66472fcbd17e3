"""Data partitioning and serial/parallel MCMC samplers.

Each sampler takes a model, one data partition, a tempering mode and a
``SamplerConfig`` and returns a ``ChainResult``. Samplers are single-threaded
and own their RNG; ``run_parallel`` fans K of them out over a thread pool and
gathers the draws by partition index.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, replace
import logging
import time
from typing import Any

from joblib import Parallel, delayed
import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr, ndtri

from .const import (
    DEFAULT_BURN_IN,
    DEFAULT_ITERATIONS,
    DEFAULT_LEAPFROG_STEPS,
    DEFAULT_STEP_SIZE,
    DEFAULT_THIN,
    HMC_TUNE_MAX_HALVINGS,
    HMC_TUNE_TARGET_ACCEPTANCE,
    HMC_TUNE_WARMUP_STEPS,
    MODEL_MIXTURE,
    MODEL_NIW,
    MODEL_PROBIT,
    TRUNCNORM_TAIL_CUTOFF,
)
from .exceptions import ModelDomainError, SamplerError
from .models import MixtureSpec, ModelSpec, NIWSpec, ProbitSpec, TemperingMode
from .util import derive_seed

_LOGGER = logging.getLogger(__name__)

Array = NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class DataPartition:
    """Rows I_k of the dataset assigned to worker k."""

    index: int
    indices: NDArray[np.int64]

    @property
    def size(self) -> int:
        return int(self.indices.size)

    def rows(self, x: Array) -> Array:
        return x[self.indices]


@dataclass(frozen=True, eq=False)
class PartitionSet:
    """A disjoint, balanced cover of range(n_obs)."""

    n_obs: int
    seed: int
    partitions: tuple[DataPartition, ...]

    @property
    def n_partitions(self) -> int:
        return len(self.partitions)

    def __iter__(self):
        return iter(self.partitions)

    def __getitem__(self, k: int) -> DataPartition:
        return self.partitions[k]

    def validate(self) -> None:
        sizes = [p.size for p in self.partitions]
        merged = np.concatenate([p.indices for p in self.partitions]) if sizes else np.zeros(0)
        if merged.size != self.n_obs or np.unique(merged).size != self.n_obs:
            raise SamplerError("partitions are not a disjoint cover of the data")
        if sizes and max(sizes) - min(sizes) > 1:
            raise SamplerError(f"partition sizes are unbalanced: {sizes}")


def partition_data(n_obs: int, n_partitions: int, seed: int) -> PartitionSet:
    """Seeded uniform shuffle, then round-robin assignment into K partitions."""
    if not 1 <= n_partitions <= n_obs:
        raise SamplerError(f"need 1 <= K <= N, got K={n_partitions}, N={n_obs}")
    order = np.random.default_rng(seed).permutation(n_obs)
    partitions = tuple(
        DataPartition(k, np.sort(order[k::n_partitions]).astype(np.int64))
        for k in range(n_partitions)
    )
    return PartitionSet(n_obs, seed, partitions)


@dataclass(frozen=True)
class SamplerConfig:
    """Chain length, thinning, master seed and HMC settings."""

    iterations: int = DEFAULT_ITERATIONS
    burn_in: int = DEFAULT_BURN_IN
    thin: int = DEFAULT_THIN
    seed: int = 0
    step_size: float = DEFAULT_STEP_SIZE
    leapfrog_steps: int = DEFAULT_LEAPFROG_STEPS
    tune: bool = True

    def __post_init__(self) -> None:
        if not self.iterations > self.burn_in >= 0:
            raise SamplerError(
                f"need iterations > burn_in >= 0, got {self.iterations} and {self.burn_in}"
            )
        if self.thin < 1:
            raise SamplerError(f"thinning stride must be >= 1, got {self.thin}")
        if self.n_keep == 0:
            raise SamplerError(
                f"{self.iterations - self.burn_in} post-burn-in iterations keep no draws at thin {self.thin}"
            )
        if not self.step_size > 0:
            raise SamplerError(f"HMC step size must be positive, got {self.step_size}")
        if self.leapfrog_steps < 1:
            raise SamplerError(f"need at least one leapfrog step, got {self.leapfrog_steps}")

    @property
    def n_keep(self) -> int:
        """Number of post-burn-in draws kept after thinning."""
        return (self.iterations - self.burn_in) // self.thin

    def keeps(self, iteration: int) -> bool:
        return iteration >= self.burn_in and (iteration - self.burn_in + 1) % self.thin == 0

    def lengthened(self, multiplier: int) -> SamplerConfig:
        """Same chain with ``multiplier`` times as many post-burn-in iterations."""
        return replace(self, iterations=self.burn_in + multiplier * (self.iterations - self.burn_in))


@dataclass(frozen=True, eq=False)
class ChainResult:
    """Draws of one chain plus its diagnostics."""

    draws: Array
    seed: int
    acceptance_rate: float = 1.0
    step_size: float | None = None
    seconds: float = 0.0

    def diagnostics(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "draws": int(self.draws.shape[0]),
            "acceptance_rate": self.acceptance_rate,
            "step_size": self.step_size,
            "seconds": round(self.seconds, 6),
        }


@dataclass(frozen=True, eq=False)
class SubposteriorSampleSet:
    """K index-aligned lists of T draws, shape (K, T, *param_shape)."""

    model_tag: str
    draws: Array
    mode: TemperingMode
    seeds: tuple[int, ...]
    diagnostics: tuple[dict[str, Any], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.draws.ndim < 3:
            raise SamplerError(f"sample set needs shape (K, T, ...), got {self.draws.shape}")
        if len(self.seeds) != self.draws.shape[0]:
            raise SamplerError("one seed per partition is required")

    @property
    def n_partitions(self) -> int:
        return int(self.draws.shape[0])

    @property
    def n_draws(self) -> int:
        return int(self.draws.shape[1])

    @property
    def param_shape(self) -> tuple[int, ...]:
        return tuple(self.draws.shape[2:])

    def partition(self, k: int) -> Array:
        return self.draws[k]


def standard_normal_tail(lower: Array, rng: np.random.Generator) -> Array:
    """Draw X ~ N(0, 1) conditioned on X > lower, elementwise.

    Inverse CDF below the tail cutoff; exponential-proposal rejection beyond it,
    where the CDF underflows.
    """
    lower = np.asarray(lower, dtype=np.float64)
    out = np.empty_like(lower)
    body = lower <= TRUNCNORM_TAIL_CUTOFF
    if body.any():
        # 1 - U lies in (0, 1], which keeps ndtri finite.
        u = 1.0 - rng.random(int(body.sum()))
        out[body] = -ndtri(u * ndtr(-lower[body]))
    tail = np.flatnonzero(~body)
    while tail.size:
        a = lower[tail]
        alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
        z = a + rng.exponential(1.0 / alpha)
        accept = rng.random(tail.size) <= np.exp(-0.5 * (z - alpha) ** 2)
        out[tail[accept]] = z[accept]
        tail = tail[~accept]
    return out


def sample_truncated_normal(
    mean: Array, positive: NDArray[np.bool_], rng: np.random.Generator
) -> Array:
    """Unit-variance normals truncated to (0, inf) where ``positive`` else (-inf, 0]."""
    sign = np.where(positive, 1.0, -1.0)
    return mean + sign * standard_normal_tail(-sign * mean, rng)


def gibbs_probit(
    model: ProbitSpec,
    partition: DataPartition,
    mode: TemperingMode,
    cfg: SamplerConfig,
    seed: int | None = None,
) -> ChainResult:
    """Data-augmented Gibbs sampler for probit regression.

    Alternates z_n | beta (truncated normals) and beta | z ~ N(Sigma X'z, Sigma)
    with Sigma = (prior_power / sigma2 I + X'X)^-1.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    started = time.perf_counter()

    x = partition.rows(model.x)
    positive = model.y[partition.indices] == 1
    d = model.dim
    precision = (mode.prior_power / model.sigma2) * np.eye(d) + x.T @ x
    chol = np.linalg.cholesky(precision)
    assert np.all(np.isfinite(chol)), "posterior precision must be positive definite"

    beta = model.prior_mean(mode)
    draws = np.empty((cfg.n_keep, d))
    kept = 0
    for iteration in range(cfg.iterations):
        z = sample_truncated_normal(x @ beta, positive, rng)
        mean = cho_solve((chol, True), x.T @ z)
        beta = mean + solve_triangular(chol, rng.standard_normal(d), lower=True, trans="T")
        if cfg.keeps(iteration):
            draws[kept] = beta
            kept += 1

    elapsed = time.perf_counter() - started
    _LOGGER.debug(
        "Gibbs probit partition %d: %d rows, %d draws in %.2fs",
        partition.index, partition.size, kept, elapsed,
    )
    return ChainResult(draws, seed, seconds=elapsed)


def sample_wishart(nu: float, scale: Array, size: int, rng: np.random.Generator) -> Array:
    """Bartlett construction: L A A' L' with A lower triangular, L = chol(V)."""
    d = scale.shape[0]
    if not nu > d - 1:
        raise SamplerError(f"Wishart degrees of freedom {nu} must exceed d-1={d - 1}")
    chol = np.linalg.cholesky(scale)
    bartlett = np.zeros((size, d, d))
    diag = np.arange(d)
    bartlett[:, diag, diag] = np.sqrt(rng.chisquare(nu - diag, size=(size, d)))
    lower = np.tril_indices(d, -1)
    bartlett[:, lower[0], lower[1]] = rng.standard_normal((size, lower[0].size))
    factor = chol @ bartlett
    draws = factor @ np.swapaxes(factor, 1, 2)
    return 0.5 * (draws + np.swapaxes(draws, 1, 2))


def sample_niw_precision(
    model: NIWSpec,
    partition: DataPartition,
    mode: TemperingMode,
    cfg: SamplerConfig,
    seed: int | None = None,
) -> ChainResult:
    """Exact conjugate draws of the precision Lambda given the partition.

    The posterior is Wishart(nu_t + n_k, (V_t^-1 + sum (x - mu)(x - mu)')^-1) where
    (nu_t, V_t) are the tempered prior parameters.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    started = time.perf_counter()

    nu_prior, scale_prior = model.tempered_prior(mode)
    nu_post = nu_prior + partition.size
    if not nu_post > model.dim - 1:
        raise SamplerError(f"posterior degrees of freedom {nu_post} too small", partition.index)
    scale_inv = np.linalg.inv(scale_prior) + model.scatter(partition.indices)
    scale_post = np.linalg.inv(scale_inv)
    scale_post = 0.5 * (scale_post + scale_post.T)
    draws = sample_wishart(nu_post, scale_post, cfg.n_keep, rng)

    elapsed = time.perf_counter() - started
    _LOGGER.debug(
        "Wishart partition %d: nu_post=%.3f, %d draws", partition.index, nu_post, draws.shape[0]
    )
    return ChainResult(draws, seed, seconds=elapsed)


def hamiltonian(log_density: float, momentum: Array) -> float:
    return -log_density + 0.5 * float(np.sum(momentum * momentum))


def leapfrog(
    position: Array,
    momentum: Array,
    grad_log_density: Callable[[Array], Array],
    step_size: float,
    n_steps: int,
) -> tuple[Array, Array]:
    """Velocity-Verlet trajectory of ``n_steps`` steps; raises on non-finite gradients."""
    grad = grad_log_density(position)
    if not np.all(np.isfinite(grad)):
        raise SamplerError("non-finite gradient at the initial position")
    momentum = momentum + 0.5 * step_size * grad
    for step in range(n_steps):
        position = position + step_size * momentum
        grad = grad_log_density(position)
        if not np.all(np.isfinite(grad)):
            raise SamplerError(f"non-finite gradient at leapfrog step {step} (step size {step_size})")
        if step < n_steps - 1:
            momentum = momentum + step_size * grad
    momentum = momentum + 0.5 * step_size * grad
    return position, momentum


def _hmc_steps(
    position: Array,
    log_density: Callable[[Array], float],
    grad_log_density: Callable[[Array], Array],
    step_size: float,
    n_steps: int,
    count: int,
    rng: np.random.Generator,
    on_step: Callable[[int, Array], None] | None = None,
) -> tuple[Array, int]:
    current_logp = log_density(position)
    accepted = 0
    for iteration in range(count):
        momentum = rng.standard_normal(position.shape)
        proposal, new_momentum = leapfrog(position, momentum, grad_log_density, step_size, n_steps)
        proposal_logp = log_density(proposal)
        log_ratio = hamiltonian(current_logp, momentum) - hamiltonian(proposal_logp, new_momentum)
        if np.isfinite(log_ratio) and np.log(rng.random()) < log_ratio:
            position, current_logp = proposal, proposal_logp
            accepted += 1
        if on_step is not None:
            on_step(iteration, position)
    return position, accepted


def tune_step_size(
    position: Array,
    log_density: Callable[[Array], float],
    grad_log_density: Callable[[Array], Array],
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[float, Array]:
    """Halve the step size until warmup acceptance reaches the target."""
    step_size = cfg.step_size
    for _ in range(HMC_TUNE_MAX_HALVINGS):
        try:
            position, accepted = _hmc_steps(
                position, log_density, grad_log_density,
                step_size, cfg.leapfrog_steps, HMC_TUNE_WARMUP_STEPS, rng,
            )
        except SamplerError:
            accepted = 0
        rate = accepted / HMC_TUNE_WARMUP_STEPS
        _LOGGER.debug("HMC warmup: step %.3g, acceptance %.2f", step_size, rate)
        if rate >= HMC_TUNE_TARGET_ACCEPTANCE:
            return step_size, position
        step_size /= 2.0
    _LOGGER.warning("HMC tuning did not reach acceptance %.2f; using step %.3g",
                    HMC_TUNE_TARGET_ACCEPTANCE, step_size)
    return step_size, position


def hmc_mixture(
    model: MixtureSpec,
    partition: DataPartition,
    mode: TemperingMode,
    cfg: SamplerConfig,
    seed: int | None = None,
) -> ChainResult:
    """Leapfrog HMC with Metropolis correction on the cluster centers."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    local = model.subset(partition.indices)
    power = mode.prior_power

    def log_density(theta: Array) -> float:
        return local.log_likelihood(theta) + power * local.log_prior(theta)

    def grad_log_density(theta: Array) -> Array:
        return local.grad_log_density(theta, None, power)

    position = model.prior_mean(mode)
    step_size = cfg.step_size
    if cfg.tune:
        step_size, position = tune_step_size(position, log_density, grad_log_density, cfg, rng)

    draws = np.empty((cfg.n_keep, *model.param_shape))
    kept = 0

    def keep(iteration: int, current: Array) -> None:
        nonlocal kept
        if cfg.keeps(iteration):
            draws[kept] = current
            kept += 1

    try:
        _, accepted = _hmc_steps(
            position, log_density, grad_log_density,
            step_size, cfg.leapfrog_steps, cfg.iterations, rng, keep,
        )
    except SamplerError as err:
        raise SamplerError(str(err), partition.index) from err

    rate = accepted / cfg.iterations
    elapsed = time.perf_counter() - started
    _LOGGER.debug(
        "HMC partition %d: step %.3g, acceptance %.3f, %d draws in %.2fs",
        partition.index, step_size, rate, kept, elapsed,
    )
    return ChainResult(draws, seed, acceptance_rate=rate, step_size=step_size, seconds=elapsed)


Sampler = Callable[[Any, DataPartition, TemperingMode, SamplerConfig, int | None], ChainResult]

SAMPLERS: dict[str, Sampler] = {
    MODEL_PROBIT: gibbs_probit,
    MODEL_NIW: sample_niw_precision,
    MODEL_MIXTURE: hmc_mixture,
}


def sampler_for(model: ModelSpec) -> Sampler:
    try:
        return SAMPLERS[model.tag]
    except KeyError as err:
        raise ModelDomainError(f"no sampler for model '{model.tag}'") from err


def _run_partition(
    sampler: Sampler,
    model: ModelSpec,
    partition: DataPartition,
    mode: TemperingMode,
    cfg: SamplerConfig,
    seed: int,
) -> ChainResult:
    try:
        return sampler(model, partition, mode, cfg, seed)
    except SamplerError as err:
        if err.partition_index is not None:
            raise
        raise SamplerError(str(err), partition.index) from err
    except Exception as err:
        raise SamplerError(f"{type(err).__name__}: {err}", partition.index) from err


def run_parallel(
    model: ModelSpec,
    partitions: PartitionSet,
    mode: TemperingMode,
    cfg: SamplerConfig,
    threads: int = 0,
) -> SubposteriorSampleSet:
    """Sample every partition concurrently with seeds derived from (master seed, k).

    The result does not depend on ``threads``: every task owns its RNG and the
    draws are gathered in partition order, then truncated to the shortest chain.
    """
    sampler = sampler_for(model)
    mode = mode.with_k(partitions.n_partitions)
    seeds = [derive_seed(cfg.seed, p.index) for p in partitions]
    n_jobs = threads if threads > 0 else -1
    _LOGGER.debug("Sampling %d partitions of %s on n_jobs=%d",
                  partitions.n_partitions, model.tag, n_jobs)

    results: list[ChainResult] = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_run_partition)(sampler, model, partition, mode, cfg, seed)
        for partition, seed in zip(partitions, seeds)
    )

    n_draws = min(result.draws.shape[0] for result in results)
    draws = np.stack([result.draws[:n_draws] for result in results])
    return SubposteriorSampleSet(
        model_tag=model.tag,
        draws=draws,
        mode=mode,
        seeds=tuple(seeds),
        diagnostics=tuple(result.diagnostics() for result in results),
    )


def run_serial(model: ModelSpec, cfg: SamplerConfig) -> SubposteriorSampleSet:
    """Full-data chain; identical to ``run_parallel`` with K=1 and the same config."""
    partitions = partition_data(model.n_obs, 1, 0)
    return run_parallel(model, partitions, TemperingMode.subposterior(1), cfg, threads=1)
