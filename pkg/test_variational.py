"""Tests for the relaxed objective, its gradients and the projected SGD optimizer."""

import logging

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
import pytest
from scipy.stats import ortho_group

from consensus_mc.aggregation import AggregationFamily, uniform_weights
from consensus_mc.exceptions import ConfigError, OptimizationError, WeightSetError
from consensus_mc.models import MixtureSpec, NIWSpec, ProbitSpec, compute_moments, log_joint
from consensus_mc.variational import (
    EntropyMode,
    MixtureGradient,
    ObjectiveConfig,
    SpectralBatch,
    estimate_objective,
    gaussian_entropy,
    grad_mog,
    grad_niw,
    grad_probit,
    objective_gradient,
    objective_mog,
    objective_niw,
    objective_probit,
    optimize,
    project_weights,
    relaxed_entropy,
)

logging.basicConfig(level=logging.DEBUG)

STEP = 1e-5


def numeric_gradient(f, w, h=STEP):
    grad = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        step = np.zeros_like(w)
        step[idx] = h
        grad[idx] = (f(w + step) - f(w - step)) / (2 * h)
    return grad


def relative_gap(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def random_psd(rng, d, low=0.5, high=3.0):
    basis = np.eye(1) if d == 1 else ortho_group.rvs(d, random_state=rng)
    return basis @ np.diag(rng.uniform(low, high, d)) @ basis.T


def random_probit(rng, n, d):
    x = rng.normal(size=(n, d))
    y = (rng.random(n) < 0.5).astype(int)
    return ProbitSpec(x=x, y=y, sigma2=float(rng.uniform(0.5, 2.0)))


class TestObjectiveConfig:
    def test_defaults(self):
        cfg = ObjectiveConfig()
        assert (cfg.batch_size, cfg.iterations) == (40, 25)
        assert cfg.step_size(0) == pytest.approx(0.1 / 11)

    def test_batch_size_positive(self):
        with pytest.raises(ConfigError):
            ObjectiveConfig(batch_size=0)

    def test_step_schedule(self):
        with pytest.raises(ConfigError):
            ObjectiveConfig(step_a=0.0)

    def test_zero_offset_schedule(self):
        cfg = ObjectiveConfig(step_a=0.5, step_b=0.0)
        assert [cfg.step_size(t) for t in range(3)] == pytest.approx([0.5, 0.25, 0.5 / 3])
        with pytest.raises(ConfigError):
            ObjectiveConfig(step_b=-1.0)

    def test_string_modes(self):
        cfg = ObjectiveConfig(entropy="relaxed_max", mixture_gradient="diagonal")
        assert cfg.entropy is EntropyMode.RELAXED_MAX
        assert cfg.mixture_gradient is MixtureGradient.DIAGONAL


class TestRelaxedEntropy:
    def test_identity(self):
        assert relaxed_entropy(np.ones((1, 3))) == 0.0

    def test_uniform_pair(self):
        assert relaxed_entropy(np.full((2, 1), 0.5)) == pytest.approx(-0.693147, abs=1e-6)

    def test_max_at_least_mean(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = rng.uniform(0.01, 1.0, size=(int(rng.integers(1, 5)), 3))
            assert relaxed_entropy(w, EntropyMode.RELAXED_MAX) >= relaxed_entropy(w)

    def test_nonpositive_weight(self):
        with pytest.raises(WeightSetError):
            relaxed_entropy(np.array([[0.0], [1.0]]))

    def test_lower_bounds_gaussian_entropy(self):
        """Relaxed entropy plus the smallest subposterior entropy never exceeds the truth."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            d, k = int(rng.integers(1, 6)), int(rng.integers(1, 5))
            covariances = [random_psd(rng, d, 0.1, 5.0) for _ in range(k)]
            w = rng.uniform(0.05, 1.0, size=(k, d))
            aggregated = sum(np.diag(w[i]) @ covariances[i] @ np.diag(w[i]) for i in range(k))
            bound = relaxed_entropy(w) + min(gaussian_entropy(c) for c in covariances)
            assert bound <= gaussian_entropy(aggregated) + 1e-12


class TestProbitObjective:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            d, k = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            model = random_probit(rng, int(rng.integers(5, 21)), d)
            batch = rng.normal(size=(k, 10, d))
            moments = compute_moments(rng.normal(size=(k, 30, d)))
            w = rng.uniform(0.2, 1.0, size=(k, d))
            numeric = numeric_gradient(lambda v: objective_probit(v, moments, batch, model), w)
            assert relative_gap(grad_probit(w, moments, batch, model), numeric) < 1e-4

    def test_prior_only_single_partition(self):
        rng = np.random.default_rng(3)
        model = ProbitSpec(x=np.zeros((0, 2)), y=np.zeros(0), sigma2=2.0)
        batch = rng.normal(size=(1, 8, 2))
        moments = compute_moments(batch)
        w = np.array([[0.7, 1.3]])
        expected = -np.diagonal(moments.second_moments[0]) * w[0] / 2.0 + 1.0 / w[0]
        assert_allclose(grad_probit(w, moments, batch, model)[0], expected)

    def test_symmetric_partitions(self):
        rng = np.random.default_rng(4)
        model = random_probit(rng, 15, 3)
        chain = rng.normal(size=(12, 3))
        batch = np.stack([chain, chain])
        grad = grad_probit(np.full((2, 3), 0.5), compute_moments(batch), batch, model)
        assert_allclose(grad[0], grad[1])

    def test_midpoint_concavity(self):
        rng = np.random.default_rng(5)
        model = random_probit(rng, 20, 3)
        batch = rng.normal(size=(3, 10, 3))
        moments = compute_moments(batch)
        for _ in range(100):
            w = rng.uniform(0.1, 1.0, size=(3, 3))
            other = w.copy()
            other[int(rng.integers(3))] = rng.uniform(0.1, 1.0, size=3)
            mid = objective_probit((w + other) / 2, moments, batch, model)
            ends = 0.5 * (
                objective_probit(w, moments, batch, model)
                + objective_probit(other, moments, batch, model)
            )
            assert mid >= ends - 1e-8

    def test_single_partition_is_average_log_joint(self):
        rng = np.random.default_rng(6)
        model = random_probit(rng, 25, 2)
        batch = rng.normal(size=(1, 30, 2))
        expected = np.mean([log_joint(model, beta) for beta in batch[0]])
        assert estimate_objective(model, np.ones((1, 2)), batch) == pytest.approx(expected, abs=1e-9)

    def test_estimator_error_shrinks_with_batch(self):
        rng = np.random.default_rng(7)
        model = random_probit(rng, 30, 2)
        w = np.full((2, 2), 0.5)

        def spread(size):
            values = [
                estimate_objective(model, w, rng.normal(0.3, 0.5, size=(2, size, 2)))
                for _ in range(400)
            ]
            return np.std(values)

        assert 8.0 <= spread(40) / spread(4000) <= 12.0

    def test_empty_batch(self):
        model = random_probit(np.random.default_rng(8), 5, 2)
        moments = compute_moments(np.zeros((1, 2, 2)))
        with pytest.raises(OptimizationError):
            grad_probit(np.ones((1, 2)), moments, np.zeros((1, 0, 2)), model)


class TestNIWObjective:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            d, k = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            model = NIWSpec(x=rng.normal(size=(int(rng.integers(0, 15)), d)), nu=d + 2.0, scale=np.eye(d))
            draws = np.stack([np.stack([random_psd(rng, d) for _ in range(5)]) for _ in range(k)])
            batch = SpectralBatch.from_draws(draws)
            w = rng.uniform(0.3, 1.0, size=(k, d))
            numeric = numeric_gradient(lambda v: objective_niw(v, batch, model), w)
            assert relative_gap(grad_niw(w, batch, model), numeric) < 1e-4

    def test_scalar_identity_weights(self):
        nu, lam = 4.0, 2.0
        model = NIWSpec(x=np.zeros((0, 1)), nu=nu, scale=np.eye(1))
        batch = SpectralBatch.from_draws(np.array([[[[lam]]]]))
        coefficient = (nu - 2.0) / 2.0
        # D * (c * Lambda^-1 - M / 2) + 1 / w with D = Lambda, M = V^-1 = 1
        expected = lam * (coefficient / lam - 0.5) + 1.0
        assert grad_niw(np.ones((1, 1)), batch, model)[0, 0] == pytest.approx(expected)

    def test_single_partition_is_average_log_joint(self):
        rng = np.random.default_rng(10)
        model = NIWSpec(x=rng.normal(size=(12, 2)), nu=4.0, scale=np.eye(2))
        draws = np.stack([random_psd(rng, 2) for _ in range(6)])[None]
        expected = np.mean([log_joint(model, lam) for lam in draws[0]])
        assert estimate_objective(model, np.ones((1, 2)), draws) == pytest.approx(expected, abs=1e-9)

    def test_singular_aggregate(self):
        model = NIWSpec(x=np.zeros((0, 2)), nu=3.0, scale=np.eye(2))
        batch = SpectralBatch.from_draws(np.zeros((2, 3, 2, 2)))
        with np.errstate(all="ignore"), pytest.raises(OptimizationError, match="condition"):
            grad_niw(np.full((2, 2), 0.5), batch, model)

    def test_midpoint_concavity(self):
        rng = np.random.default_rng(12)
        model = NIWSpec(x=rng.normal(size=(20, 3)), nu=5.0, scale=np.eye(3))
        batch = SpectralBatch.from_draws(
            np.stack([np.stack([random_psd(rng, 3) for _ in range(10)]) for _ in range(3)])
        )
        for _ in range(100):
            w = rng.uniform(0.1, 1.0, size=(3, 3))
            other = w.copy()
            other[int(rng.integers(3))] = rng.uniform(0.1, 1.0, size=3)
            mid = objective_niw((w + other) / 2, batch, model)
            ends = 0.5 * (objective_niw(w, batch, model) + objective_niw(other, batch, model))
            assert mid >= ends - 1e-8

    def test_gradient_finite(self):
        rng = np.random.default_rng(11)
        model = NIWSpec(x=rng.normal(size=(30, 3)), nu=5.0, scale=np.eye(3))
        draws = np.stack([np.stack([random_psd(rng, 3) for _ in range(4)]) for _ in range(3)])
        grad = objective_gradient(model, np.full((3, 3), 1e-6), draws)
        assert np.all(np.isfinite(grad))


class TestMixtureObjective:
    def test_exact_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            n_clusters, d, k = (int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4)))
            model = MixtureSpec(
                x=2.0 * rng.normal(size=(int(rng.integers(1, 21)), d)),
                n_clusters=n_clusters, tau2=4.0, sigma2=1.0,
            )
            batch = rng.normal(size=(k, 6, n_clusters, d))
            w = rng.uniform(0.2, 1.0, size=(k, n_clusters, d))
            numeric = numeric_gradient(lambda v: objective_mog(v, batch, model), w)
            assert relative_gap(grad_mog(w, batch, model), numeric) < 1e-4

    def test_diagonal_gradient_agrees_for_one_cluster(self):
        rng = np.random.default_rng(13)
        model = MixtureSpec(x=rng.normal(size=(10, 2)), n_clusters=1, tau2=2.0, sigma2=0.5)
        batch = rng.normal(size=(2, 5, 1, 2))
        w = np.full((2, 1, 2), 0.5)
        assert_allclose(
            grad_mog(w, batch, model, variant=MixtureGradient.DIAGONAL),
            grad_mog(w, batch, model, variant=MixtureGradient.EXACT),
        )

    def test_single_cluster_closed_form(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(8, 1))
        model = MixtureSpec(x=x, n_clusters=1, tau2=3.0, sigma2=0.5)
        batch = rng.normal(size=(2, 4, 1, 1))
        w = np.array([[[0.3]], [[0.7]]])
        centers = np.einsum("kld,kbld->bld", w, batch)
        precision = 1 / 3.0 + 8 / 0.5
        target = x.sum() / 0.5 / precision
        expected = -precision * np.einsum("kbld,bld->kld", batch, centers - target) / 4 + 1 / (2 * w)
        assert_allclose(grad_mog(w, batch, model), expected)

    def test_empty_batch(self):
        model = MixtureSpec(x=np.zeros((3, 1)), n_clusters=2)
        with pytest.raises(OptimizationError):
            grad_mog(np.full((2, 2, 1), 0.5), np.zeros((2, 0, 2, 1)), model)


class TestProjectWeights:
    def test_projects_every_coordinate(self):
        weights = project_weights(np.array([[1.2, -1.0], [0.9, 3.0]]), floor=1e-6)
        assert_allclose(weights.weights, [[0.65, 1e-6], [0.35, 1 - 1e-6]])
        assert weights.family is AggregationFamily.VECTOR

    def test_idempotent(self):
        raw = np.random.default_rng(15).normal(size=(3, 4))
        once = project_weights(raw).weights
        assert_allclose(project_weights(once).weights, once, atol=1e-12)


class TestOptimize:
    def test_single_partition_stays_identity(self):
        rng = np.random.default_rng(16)
        model = random_probit(rng, 20, 2)
        weights, trace = optimize(model, rng.normal(size=(1, 50, 2)), ObjectiveConfig(iterations=10), seed=0)
        assert_array_equal(weights.weights, np.ones((1, 2)))
        assert len(trace) == 10

    def test_precision_weighting(self):
        """Two Gaussian subposteriors with variances 0.5 and 1.5 get weights near 0.75/0.25."""
        rng = np.random.default_rng(17)
        x = rng.normal(1.0, 1.0, size=(200, 1))
        model = MixtureSpec(x=x, n_clusters=1, tau2=100.0, sigma2=1.0)
        precision = 1 / 100.0 + 200.0
        center = x.sum() / precision
        draws = np.stack([
            center + np.sqrt(0.5) * rng.normal(size=(2000, 1, 1)),
            center + np.sqrt(1.5) * rng.normal(size=(2000, 1, 1)),
        ])
        cfg = ObjectiveConfig(batch_size=200, iterations=300, step_a=1.0, step_b=10.0)
        weights, trace = optimize(model, draws, cfg, seed=3)
        assert weights.weights[0, 0, 0] == pytest.approx(0.75, abs=0.05)
        assert len(trace) == 300

    def test_every_iterate_feasible_and_deterministic(self):
        rng = np.random.default_rng(18)
        model = random_probit(rng, 30, 3)
        draws = rng.normal(size=(3, 60, 3)) * np.array([0.2, 0.5, 1.0])[:, None, None]
        cfg = ObjectiveConfig(iterations=15, batch_size=25)
        first, trace = optimize(model, draws, cfg, seed=5)
        second, _ = optimize(model, draws, cfg, seed=5)
        assert_array_equal(first.weights, second.weights)
        assert_allclose(first.weights.sum(axis=0), 1.0, atol=1e-10)
        assert np.all(np.isfinite(trace.objectives))
        assert [row.iteration for row in trace.rows] == list(range(15))

    def test_objective_does_not_degrade(self):
        rng = np.random.default_rng(19)
        model = random_probit(rng, 40, 2)
        draws = rng.normal(0.2, 0.3, size=(3, 400, 2)) * np.array([1.0, 2.0, 4.0])[:, None, None]
        start = estimate_objective(model, uniform_weights(3, 2).weights, draws)
        for seed in range(10):
            cfg = ObjectiveConfig(iterations=40, batch_size=40, step_a=1.0)
            weights, trace = optimize(model, draws, cfg, seed=seed)
            assert estimate_objective(model, weights, draws) >= start
            assert len(trace.objectives) == 40

    def test_niw_weights_stay_spectral(self):
        rng = np.random.default_rng(20)
        model = NIWSpec(x=rng.normal(size=(40, 2)), nu=4.0, scale=np.eye(2))
        draws = np.stack([np.stack([random_psd(rng, 2) for _ in range(30)]) for _ in range(2)])
        weights, _ = optimize(model, draws, ObjectiveConfig(iterations=5, batch_size=10), seed=1)
        assert weights.family is AggregationFamily.SPECTRAL
        assert weights.shape == (2,)

    def test_mixture_weights_carry_alignment(self):
        rng = np.random.default_rng(21)
        model = MixtureSpec(x=rng.normal(size=(30, 2)), n_clusters=2, tau2=4.0)
        base = np.array([[-2.0, 0.0], [2.0, 0.0]])
        draws = np.stack([base + 0.1 * rng.normal(size=(20, 2, 2)), base[::-1] + 0.1 * rng.normal(size=(20, 2, 2))])
        weights, _ = optimize(model, draws, ObjectiveConfig(iterations=3, batch_size=5), seed=2)
        assert_array_equal(weights.alignment.permutations, [[0, 1], [1, 0]])
        assert weights.shape == (2, 2)

    def test_abort_keeps_trace(self):
        model = NIWSpec(x=np.zeros((0, 2)), nu=3.0, scale=np.eye(2))
        with np.errstate(all="ignore"), pytest.raises(OptimizationError) as err:
            optimize(model, np.zeros((2, 4, 2, 2)), ObjectiveConfig(iterations=3, batch_size=2), seed=0)
        assert len(err.value.trace) == 0

    def test_zero_step_offset_runs(self):
        rng = np.random.default_rng(23)
        model = random_probit(rng, 20, 2)
        cfg = ObjectiveConfig(iterations=5, batch_size=10, step_b=0.0)
        weights, trace = optimize(model, rng.normal(size=(2, 20, 2)), cfg, seed=0)
        assert [row.step for row in trace.rows] == pytest.approx([0.1 / t for t in range(1, 6)])
        assert_allclose(weights.weights.sum(axis=0), 1.0)

    def test_starts_from_uniform(self):
        rng = np.random.default_rng(22)
        model = random_probit(rng, 10, 2)
        weights, trace = optimize(model, rng.normal(size=(4, 10, 2)), ObjectiveConfig(iterations=0), seed=0)
        assert_array_equal(weights.weights, uniform_weights(4, 2).weights)
        assert len(trace) == 0
