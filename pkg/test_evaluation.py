"""Tests for test-function suites, relative errors and report summaries."""

import numpy as np
from numpy.testing import assert_allclose
import pytest
from scipy.special import logsumexp

from consensus_mc.evaluation import (
    Algorithm,
    SuiteKind,
    TestFunctionSuite,
    comembership_matrix,
    compare,
    default_suites,
    effective_sample_size,
    estimate_expectations,
    evaluate_algorithms,
    joint_trim_mask,
    relative_error,
    summarize,
)
from consensus_mc.exceptions import EvaluationError


class TestRelativeError:
    def test_exact_agreement(self):
        assert relative_error(1.0, 1.0) == 0.0

    def test_ten_percent(self):
        assert relative_error(1.1, 1.0) == pytest.approx(0.1)

    def test_zero_reference_is_excluded(self):
        assert relative_error(0.5, 0.0) is None

    def test_sign_insensitive(self):
        assert relative_error(-2.0 * 1.25, -2.0) == pytest.approx(0.25)


class TestSuites:
    def test_function_counts(self):
        assert TestFunctionSuite(SuiteKind.FIRST_MOMENTS, (4,)).n_functions == 4
        assert TestFunctionSuite(SuiteKind.PURE_SECOND_MOMENTS, (4,)).n_functions == 4
        assert TestFunctionSuite(SuiteKind.MIXED_SECOND_MOMENTS, (4,)).n_functions == 6
        assert TestFunctionSuite(SuiteKind.EIGENVALUE_PAIRS, (3, 3)).n_functions == 3
        points = np.zeros((5, 2))
        assert TestFunctionSuite(SuiteKind.COMEMBERSHIP, (2, 2), points).n_functions == 10

    def test_labels(self):
        suite = TestFunctionSuite(SuiteKind.MIXED_SECOND_MOMENTS, (3,))
        assert suite.labels == ["theta*theta[0,1]", "theta*theta[0,2]", "theta*theta[1,2]"]

    def test_constant_first_moments(self):
        v = np.array([1.5, -2.0, 0.25])
        suite = TestFunctionSuite(SuiteKind.FIRST_MOMENTS, (3,))
        assert_allclose(estimate_expectations(np.tile(v, (7, 1)), suite), v)

    def test_mixed_second_moment(self):
        suite = TestFunctionSuite(SuiteKind.MIXED_SECOND_MOMENTS, (2,))
        assert_allclose(estimate_expectations(np.array([[1.0, 1.0], [3.0, 3.0]]), suite), [5.0])

    def test_eigenvalues_of_covariance(self):
        suite = TestFunctionSuite(SuiteKind.EIGENVALUES, (2, 2))
        draws = np.tile(np.diag([4.0, 1.0]), (3, 1, 1))
        assert_allclose(estimate_expectations(draws, suite), [1.0, 0.25])

    def test_eigenvalue_squares_and_pairs(self):
        draws = np.tile(np.diag([4.0, 1.0]), (2, 1, 1))
        squares = TestFunctionSuite(SuiteKind.EIGENVALUE_SQUARES, (2, 2))
        pairs = TestFunctionSuite(SuiteKind.EIGENVALUE_PAIRS, (2, 2))
        assert_allclose(estimate_expectations(draws, squares), [1.0, 0.0625])
        assert_allclose(estimate_expectations(draws, pairs), [0.25])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        draws = rng.normal(size=(20, 3))
        suite = TestFunctionSuite(SuiteKind.PURE_SECOND_MOMENTS, (3,))
        assert_allclose(
            estimate_expectations(draws, suite), estimate_expectations(draws[rng.permutation(20)], suite)
        )

    def test_shape_mismatch(self):
        suite = TestFunctionSuite(SuiteKind.FIRST_MOMENTS, (3,))
        with pytest.raises(EvaluationError):
            estimate_expectations(np.zeros((4, 2)), suite)

    def test_eigen_suite_needs_matrices(self):
        with pytest.raises(EvaluationError):
            TestFunctionSuite(SuiteKind.EIGENVALUES, (3,))

    def test_comembership_needs_points(self):
        with pytest.raises(EvaluationError):
            TestFunctionSuite(SuiteKind.COMEMBERSHIP, (2, 1), np.zeros((0, 1)))

    def test_default_suites(self):
        assert default_suites("probit") == [
            SuiteKind.FIRST_MOMENTS, SuiteKind.PURE_SECOND_MOMENTS, SuiteKind.MIXED_SECOND_MOMENTS
        ]
        assert SuiteKind.EIGENVALUES in default_suites("niw")
        assert default_suites("mixture") == [SuiteKind.COMEMBERSHIP]


class TestComembership:
    def test_identical_points(self):
        centers = np.random.default_rng(1).normal(size=(10, 2, 1))
        matrix = comembership_matrix(centers, np.array([[0.3], [0.3]]))
        assert matrix[0, 1] == 1.0

    def test_separated_points(self):
        centers = np.tile(np.array([[-10.0], [10.0]]), (5, 1, 1))
        matrix = comembership_matrix(centers, np.array([[-9.5], [9.0]]))
        assert matrix[0, 1] == 0.0

    def test_symmetric_with_unit_diagonal(self):
        rng = np.random.default_rng(2)
        matrix = comembership_matrix(rng.normal(size=(50, 3, 2)), rng.normal(size=(6, 2)))
        assert_allclose(matrix, matrix.T)
        assert_allclose(np.diag(matrix), 1.0)
        assert matrix.min() >= 0.0 and matrix.max() <= 1.0

    def test_matches_grid_posterior(self):
        """Two clusters on a line, three points: compare against quadrature over a center grid."""
        x = np.array([-1.0, 0.2, 1.5])
        tau2, sigma2 = 4.0, 1.0
        grid = np.linspace(-6.0, 6.0, 241)
        a, b = np.meshgrid(grid, grid, indexing="ij")
        centers = np.stack([a.ravel(), b.ravel()], axis=1)
        sq = (x[None, :, None] - centers[:, None, :]) ** 2
        log_post = (
            -np.sum(centers**2, axis=1) / (2 * tau2)
            + logsumexp(np.log(0.5) - sq / (2 * sigma2), axis=2).sum(axis=1)
        )
        probs = np.exp(log_post - logsumexp(log_post))
        assignments = np.argmin(sq, axis=2)
        exact = {
            (i, j): float(np.sum(probs * (assignments[:, i] == assignments[:, j])))
            for i, j in ((0, 1), (0, 2), (1, 2))
        }

        rng = np.random.default_rng(3)
        draws = centers[rng.choice(len(centers), size=20_000, p=probs)][:, :, None]
        matrix = comembership_matrix(draws, x[:, None], sigma2)
        for (i, j), value in exact.items():
            assert matrix[i, j] == pytest.approx(value, abs=0.02)

    def test_suite_matches_matrix(self):
        rng = np.random.default_rng(4)
        draws = rng.normal(size=(30, 2, 2))
        points = rng.normal(size=(4, 2))
        suite = TestFunctionSuite(SuiteKind.COMEMBERSHIP, (2, 2), points)
        matrix = comembership_matrix(draws, points)
        rows, cols = np.triu_indices(4, 1)
        assert_allclose(estimate_expectations(draws, suite), matrix[rows, cols])

    def test_empty_points(self):
        with pytest.raises(EvaluationError):
            comembership_matrix(np.zeros((3, 2, 1)), np.zeros((0, 1)))


class TestSummarize:
    def test_singleton(self):
        report = summarize([0.1])
        assert (report.median, report.q1, report.q3) == (0.1, 0.1, 0.1)

    def test_odd_median(self):
        assert summarize([0.1, 0.2, 0.3]).median == pytest.approx(0.2)

    def test_linear_quartiles(self):
        report = summarize([1.0, 2.0, 3.0, 4.0])
        assert report.median == pytest.approx(2.5)
        assert (report.q1, report.q3) == (pytest.approx(1.75), pytest.approx(3.25))

    def test_exclusions_counted(self):
        report = summarize([None, 0.5, None, 1.5], "vcmc", "first_moments", k=4)
        assert report.n_excluded == 2
        assert report.n_functions == 2
        assert report.as_dict() == {
            "algorithm": "vcmc",
            "suite": "first_moments",
            "K": 4,
            "median": 1.0,
            "q1": 0.75,
            "q3": 1.25,
            "n_functions": 2,
            "n_excluded": 2,
        }

    def test_everything_excluded(self):
        with pytest.raises(EvaluationError):
            summarize([None, None])


class TestJointTrimming:
    def test_keeps_lowest_worst_errors(self):
        errors = {
            "uniform_cmc": [0.1, 0.9, 0.2, 0.3],
            "vcmc": [0.5, 0.1, 0.1, 0.05],
        }
        keep = joint_trim_mask(errors, 0.5)
        assert keep.tolist() == [False, False, True, True]

    def test_full_fraction_keeps_valid(self):
        keep = joint_trim_mask({"a": [0.1, None], "b": [0.2, 0.3]}, 1.0)
        assert keep.tolist() == [True, False]

    def test_bad_fraction(self):
        with pytest.raises(EvaluationError):
            joint_trim_mask({"a": [0.1]}, 0.0)


class TestEvaluateAlgorithms:
    def test_reference_against_itself(self):
        rng = np.random.default_rng(5)
        reference = rng.normal(1.0, 1.0, size=(100, 3))
        suite = TestFunctionSuite(SuiteKind.FIRST_MOMENTS, (3,))
        reports = evaluate_algorithms({Algorithm.SERIAL: reference}, reference, suite, k=5)
        assert reports[Algorithm.SERIAL].median == 0.0
        assert reports[Algorithm.SERIAL].k == 5

    def test_better_algorithm_has_lower_median(self):
        rng = np.random.default_rng(6)
        reference = rng.normal(2.0, 0.1, size=(200, 4))
        suite = TestFunctionSuite(SuiteKind.FIRST_MOMENTS, (4,))
        reports = evaluate_algorithms(
            {"close": reference + 0.01, "far": reference + 0.5}, reference, suite
        )
        assert reports["close"].median < reports["far"].median

    def test_compare_shape_mismatch(self):
        with pytest.raises(EvaluationError):
            compare(np.zeros(2), np.zeros(3))


class TestEffectiveSampleSize:
    def test_independent_draws(self):
        chain = np.random.default_rng(7).normal(size=(5000, 2))
        assert np.all(effective_sample_size(chain) > 3500)

    def test_correlated_chain(self):
        rng = np.random.default_rng(8)
        chain = np.empty(5000)
        chain[0] = 0.0
        for t in range(1, 5000):
            chain[t] = 0.9 * chain[t - 1] + rng.normal()
        # AR(1) with rho = 0.9 has ESS n (1 - rho) / (1 + rho)
        assert effective_sample_size(chain)[0] == pytest.approx(5000 * 0.1 / 1.9, rel=0.35)
