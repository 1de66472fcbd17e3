"""Test-function suites, relative errors against the serial chain, and report summaries."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
import logging
import math
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .const import MODEL_MIXTURE, MODEL_NIW, REFERENCE_THRESHOLD
from .exceptions import EvaluationError

_LOGGER = logging.getLogger(__name__)

Array = NDArray[np.float64]


class SuiteKind(StrEnum):
    FIRST_MOMENTS = "first_moments"
    PURE_SECOND_MOMENTS = "pure_second_moments"
    MIXED_SECOND_MOMENTS = "mixed_second_moments"
    EIGENVALUES = "eigenvalues"
    EIGENVALUE_SQUARES = "eigenvalue_squares"
    EIGENVALUE_PAIRS = "eigenvalue_pairs"
    COMEMBERSHIP = "comembership"


class Algorithm(StrEnum):
    SERIAL = "serial"
    UNIFORM_CMC = "uniform_cmc"
    GAUSSIAN_CMC = "gaussian_cmc"
    VCMC = "vcmc"


EIGEN_SUITES = (SuiteKind.EIGENVALUES, SuiteKind.EIGENVALUE_SQUARES, SuiteKind.EIGENVALUE_PAIRS)
MOMENT_SUITES = (
    SuiteKind.FIRST_MOMENTS, SuiteKind.PURE_SECOND_MOMENTS, SuiteKind.MIXED_SECOND_MOMENTS
)


@dataclass(frozen=True, eq=False)
class TestFunctionSuite:
    """A family of scalar test functions f(theta) evaluated draw by draw."""

    __test__ = False

    kind: SuiteKind
    param_shape: tuple[int, ...]
    test_points: Array | None = None
    sigma2: float = 1.0
    log_weights: Array | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", SuiteKind(self.kind))
        object.__setattr__(self, "param_shape", tuple(self.param_shape))
        if self.kind in EIGEN_SUITES and (
            len(self.param_shape) != 2 or self.param_shape[0] != self.param_shape[1]
        ):
            raise EvaluationError(f"{self.kind} needs square matrix parameters, got {self.param_shape}")
        if self.kind is SuiteKind.COMEMBERSHIP:
            if self.test_points is None or len(self.test_points) == 0:
                raise EvaluationError("comembership needs a nonempty set of test points")
            if len(self.param_shape) != 2:
                raise EvaluationError(f"comembership needs (L, d) parameters, got {self.param_shape}")
            object.__setattr__(self, "test_points", np.atleast_2d(np.asarray(self.test_points, float)))

    @property
    def _size(self) -> int:
        if self.kind is SuiteKind.COMEMBERSHIP:
            return len(self.test_points)
        if self.kind in EIGEN_SUITES:
            return self.param_shape[0]
        return math.prod(self.param_shape)

    @property
    def n_functions(self) -> int:
        size = self._size
        if self.kind in (
            SuiteKind.MIXED_SECOND_MOMENTS, SuiteKind.EIGENVALUE_PAIRS, SuiteKind.COMEMBERSHIP
        ):
            return size * (size - 1) // 2
        return size

    @property
    def labels(self) -> list[str]:
        size = self._size
        prefix = {
            SuiteKind.FIRST_MOMENTS: "theta",
            SuiteKind.PURE_SECOND_MOMENTS: "theta^2",
            SuiteKind.EIGENVALUES: "rho",
            SuiteKind.EIGENVALUE_SQUARES: "rho^2",
        }
        if self.kind in prefix:
            return [f"{prefix[self.kind]}[{i}]" for i in range(size)]
        rows, cols = np.triu_indices(size, 1)
        name = {
            SuiteKind.MIXED_SECOND_MOMENTS: "theta*theta",
            SuiteKind.EIGENVALUE_PAIRS: "rho*rho",
            SuiteKind.COMEMBERSHIP: "same",
        }[self.kind]
        return [f"{name}[{i},{j}]" for i, j in zip(rows, cols)]

    def evaluate(self, draws: Array) -> Array:
        """Function values per draw, shape (T, n_functions)."""
        draws = np.asarray(draws, dtype=np.float64)
        if draws.shape[1:] != self.param_shape:
            raise EvaluationError(
                f"{self.kind}: draws of shape {draws.shape[1:]} do not match {self.param_shape}"
            )
        if draws.shape[0] == 0:
            raise EvaluationError(f"{self.kind}: no draws to evaluate")
        kind = self.kind
        if kind is SuiteKind.COMEMBERSHIP:
            assignments = cluster_assignments(draws, self.test_points, self.sigma2, self.log_weights)
            rows, cols = np.triu_indices(assignments.shape[1], 1)
            return (assignments[:, rows] == assignments[:, cols]).astype(np.float64)
        if kind in EIGEN_SUITES:
            values = covariance_spectrum(draws)
        else:
            values = draws.reshape(draws.shape[0], -1)
        if kind in (SuiteKind.FIRST_MOMENTS, SuiteKind.EIGENVALUES):
            return values
        if kind in (SuiteKind.PURE_SECOND_MOMENTS, SuiteKind.EIGENVALUE_SQUARES):
            return values * values
        rows, cols = np.triu_indices(values.shape[1], 1)
        return values[:, rows] * values[:, cols]


def default_suites(model_tag: str) -> list[SuiteKind]:
    if model_tag == MODEL_NIW:
        return list(EIGEN_SUITES)
    if model_tag == MODEL_MIXTURE:
        return [SuiteKind.COMEMBERSHIP]
    return list(MOMENT_SUITES)


def covariance_spectrum(precisions: Array) -> Array:
    """Descending eigenvalues of Lambda^-1 for a stack of precision draws."""
    eigenvalues = np.linalg.eigvalsh(precisions)
    if eigenvalues.min() <= 0:
        raise EvaluationError("eigenvalue suites need positive definite precision draws")
    # ascending eigenvalues of Lambda give descending ones of its inverse
    return 1.0 / eigenvalues


def cluster_assignments(
    centers: Array, test_points: Array, sigma2: float = 1.0, log_weights: Array | None = None
) -> NDArray[np.int64]:
    """Responsibility argmax of every test point under every center draw, shape (T, n)."""
    sq = np.sum((test_points[None, :, None, :] - centers[:, None, :, :]) ** 2, axis=-1)
    logits = -sq / (2.0 * sigma2)
    if log_weights is not None:
        logits = logits + log_weights[None, None, :]
    return np.argmax(logits, axis=-1)


def comembership_matrix(
    centers: Any, test_points: Array, sigma2: float = 1.0, log_weights: Array | None = None
) -> Array:
    """P[x_i and x_j share a cluster], estimated as the fraction of draws agreeing."""
    test_points = np.atleast_2d(np.asarray(test_points, dtype=np.float64))
    if test_points.shape[0] == 0 or test_points.size == 0:
        raise EvaluationError("comembership needs a nonempty set of test points")
    draws = np.asarray(getattr(centers, "draws", centers), dtype=np.float64)
    assignments = cluster_assignments(draws, test_points, sigma2, log_weights)
    same = assignments[:, :, None] == assignments[:, None, :]
    return same.mean(axis=0)


def estimate_expectations(samples: Any, suite: TestFunctionSuite) -> Array:
    """Monte Carlo average of every test function over (T, *shape) draws."""
    draws = np.asarray(getattr(samples, "draws", samples), dtype=np.float64)
    return suite.evaluate(draws).mean(axis=0)


def relative_error(estimate: float, reference: float) -> float | None:
    """|estimate - reference| / |reference|, or None when the reference is ~0."""
    if abs(reference) < REFERENCE_THRESHOLD:
        return None
    return abs(estimate - reference) / abs(reference)


@dataclass(frozen=True)
class EvaluationReport:
    """Per-function errors of one algorithm on one suite, with median and quartiles."""

    algorithm: str
    suite: str
    median: float
    q1: float
    q3: float
    n_functions: int
    n_excluded: int
    k: int | None = None
    labels: tuple[str, ...] = ()
    errors: tuple[float | None, ...] = field(default_factory=tuple)

    def as_dict(self) -> dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "suite": self.suite,
            "K": self.k,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "n_functions": self.n_functions,
            "n_excluded": self.n_excluded,
        }


def summarize(
    errors: Sequence[float | None],
    algorithm: str = "",
    suite: str = "",
    k: int | None = None,
    labels: Sequence[str] | None = None,
    keep: NDArray[np.bool_] | None = None,
) -> EvaluationReport:
    """Median and linearly interpolated quartiles of the retained errors.

    ``None`` entries (near-zero references) are excluded and counted;
    ``keep`` optionally masks functions out, as joint trimming does.
    """
    values = np.array([np.nan if e is None else e for e in errors], dtype=np.float64)
    retained = ~np.isnan(values)
    n_excluded = int((~retained).sum())
    if keep is not None:
        retained &= np.asarray(keep, dtype=bool)
    if not retained.any():
        raise EvaluationError(f"{algorithm}/{suite}: every test function was excluded")
    q1, median, q3 = np.percentile(values[retained], [25.0, 50.0, 75.0], method="linear")
    return EvaluationReport(
        algorithm=algorithm,
        suite=suite,
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        n_functions=int(retained.sum()),
        n_excluded=n_excluded,
        k=k,
        labels=tuple(labels) if labels is not None else (),
        errors=tuple(errors),
    )


def compare(
    estimates: Array, reference: Array
) -> list[float | None]:
    """Per-function relative errors of an estimate vector against the reference."""
    if estimates.shape != reference.shape:
        raise EvaluationError(f"estimate shape {estimates.shape} != reference shape {reference.shape}")
    return [relative_error(float(e), float(r)) for e, r in zip(estimates, reference)]


def joint_trim_mask(
    errors_by_algorithm: Mapping[str, Sequence[float | None]], fraction: float
) -> NDArray[np.bool_]:
    """Keep the ``fraction`` of functions whose worst error across algorithms is smallest."""
    if not 0.0 < fraction <= 1.0:
        raise EvaluationError(f"trim fraction must lie in (0, 1], got {fraction}")
    table = np.array(
        [[np.nan if e is None else e for e in errs] for errs in errors_by_algorithm.values()],
        dtype=np.float64,
    )
    valid = ~np.isnan(table).any(axis=0)
    keep = np.zeros(table.shape[1], dtype=bool)
    if fraction >= 1.0:
        return valid
    worst = np.where(valid, table.max(axis=0), np.inf)
    n_keep = math.ceil(fraction * int(valid.sum()))
    keep[np.argsort(worst, kind="stable")[:n_keep]] = True
    return keep & valid


def evaluate_algorithms(
    samples_by_algorithm: Mapping[str, Any],
    reference: Any,
    suite: TestFunctionSuite,
    k: int | None = None,
    trim_fraction: float = 1.0,
) -> dict[str, EvaluationReport]:
    """One report per algorithm on one suite, with optional joint trimming."""
    reference_values = estimate_expectations(reference, suite)
    labels = suite.labels
    errors = {
        algorithm: compare(estimate_expectations(samples, suite), reference_values)
        for algorithm, samples in samples_by_algorithm.items()
    }
    excluded = sum(1 for value in reference_values if abs(value) < REFERENCE_THRESHOLD)
    if excluded:
        _LOGGER.warning("%s: %d of %d test functions excluded (reference ~ 0)",
                        suite.kind, excluded, len(reference_values))
    keep = joint_trim_mask(errors, trim_fraction) if trim_fraction < 1.0 else None
    return {
        algorithm: summarize(errs, algorithm, str(suite.kind), k, labels, keep)
        for algorithm, errs in errors.items()
    }


def effective_sample_size(chain: Array) -> Array:
    """Autocorrelation ESS per coordinate, truncating at the first negative autocorrelation."""
    values = np.asarray(chain, dtype=np.float64)
    values = values.reshape(values.shape[0], -1)
    n = values.shape[0]
    if n < 2:
        return np.full(values.shape[1], float(n))
    centered = values - values.mean(axis=0)
    padded = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=padded, axis=0)
    autocov = np.fft.irfft(spectrum * np.conj(spectrum), n=padded, axis=0)[:n]
    ess = np.full(values.shape[1], float(n))
    for j in range(values.shape[1]):
        if autocov[0, j] <= 0:
            continue
        rho = autocov[:, j] / autocov[0, j]
        negative = np.flatnonzero(rho[1:] < 0)
        cutoff = negative[0] + 1 if negative.size else n
        ess[j] = n / max(1.0 + 2.0 * rho[1:cutoff].sum(), 1.0 / n)
    return ess
