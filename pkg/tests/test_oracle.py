import math
import time

import numpy as np
import pytest

from lowchurn.data import make_synthetic
from lowchurn.oracle import (
    AnchorParams,
    anchor_minimizer,
    brute_force_pointwise_minimizer,
    lambda_star_bound,
    optimal_mixture_classifier,
    risk_churn_bound,
    simplex_grid,
)
from lowchurn.simplex import ScoringFunction
from lowchurn.verification import expected_anchor_weight

CE = ScoringFunction.cross_entropy()
BRIER = ScoringFunction.brier()


def test_simplex_grid_counts():
    grid = simplex_grid(3, 0.1)
    assert grid.shape == (math.comb(12, 2), 3)
    assert np.allclose(grid.sum(axis=1), 1.0)
    assert len({tuple(r) for r in np.round(grid, 9)}) == grid.shape[0]


class TestBruteForce:
    def test_degenerate_weight(self, phi):
        v = brute_force_pointwise_minimizer(phi, [1.0, 0.0]).values
        assert np.abs(v - [1.0, 0.0]).sum() < 0.02

    def test_symmetric_brier(self):
        v = brute_force_pointwise_minimizer(BRIER, [0.5, 0.5]).values
        assert np.abs(v - 0.5).max() < 1e-4

    def test_scale_invariance(self):
        v = brute_force_pointwise_minimizer(CE, [0.6, 1.4]).values
        assert np.abs(v - [0.3, 0.7]).max() < 1e-4

    def test_errors(self):
        with pytest.raises(ValueError):
            brute_force_pointwise_minimizer(CE, [0.0, 0.0])
        with pytest.raises(ValueError):
            brute_force_pointwise_minimizer(CE, [-0.1, 1.1])
        with pytest.raises(ValueError):
            brute_force_pointwise_minimizer(CE, [0.5, 0.5], grid_step=0.2)
        with pytest.raises(ValueError):
            brute_force_pointwise_minimizer(CE, np.ones(7), grid_step=0.01)

    def test_deterministic(self):
        a = brute_force_pointwise_minimizer(CE, [0.2, 0.3, 0.5]).values
        b = brute_force_pointwise_minimizer(CE, [0.2, 0.3, 0.5]).values
        assert np.array_equal(a, b)

    def test_strict_properness(self, phi, rng):
        step = 0.01
        for _ in range(20):
            m = int(rng.integers(2, 6))
            u = rng.dirichlet(np.ones(m))
            v = brute_force_pointwise_minimizer(phi, u, grid_step=step).values
            assert np.abs(v - u).sum() <= 2 * step


class TestMixture:
    @pytest.fixture
    def dist(self):
        return make_synthetic("logistic-ground-truth", 3, 3, 10, seed=5)[1]

    def test_endpoints(self, dist):
        x = dist.sample_features(1)[0]
        assert np.allclose(optimal_mixture_classifier(dist, 1.0, x).values, dist.p(x)[0])
        assert np.allclose(optimal_mixture_classifier(dist, 0.0, x).values, dist.g(x)[0])

    def test_g_equals_p(self, dist):
        dist.base_fn = dist.class_probability_fn
        x = dist.sample_features(1)[0]
        assert np.allclose(optimal_mixture_classifier(dist, 0.37, x).values, dist.p(x)[0])

    def test_bad_lambda(self, dist):
        with pytest.raises(ValueError):
            optimal_mixture_classifier(dist, 1.5, dist.sample_features(1)[0])


class TestAnchor:
    def test_ignores_base_when_alpha_zero(self):
        p = np.array([0.2, 0.5, 0.3])
        assert np.allclose(anchor_minimizer(p, AnchorParams(0.0, 1.0)).values, p, atol=1e-15)

    def test_flip_example(self):
        v = anchor_minimizer([0.7, 0.3], AnchorParams(1.0, 1.0)).values
        assert v == pytest.approx([0.49, 0.51], abs=1e-12)
        brute = brute_force_pointwise_minimizer(CE, expected_anchor_weight(np.array([0.7, 0.3]), AnchorParams(1.0, 1.0))).values
        assert np.abs(brute - [0.49, 0.51]).sum() < 1e-6

    @pytest.mark.parametrize("alpha,eta", [(0.0, 0.0), (0.5, 0.7), (1.0, 1.0)])
    def test_hard_prediction_fixed(self, alpha, eta):
        assert anchor_minimizer([1.0, 0.0], AnchorParams(alpha, eta)).values.tolist() == [1.0, 0.0]
        assert anchor_minimizer([0.0, 0.0, 1.0], AnchorParams(alpha, eta)).values.tolist() == [0.0, 0.0, 1.0]

    def test_params_validated(self):
        with pytest.raises(ValueError):
            AnchorParams(1.2, 0.5)
        with pytest.raises(ValueError):
            AnchorParams(0.5, -0.1)

    def test_matches_brute_force(self, rng):
        for _ in range(30):
            m = int(rng.integers(2, 5))
            p = rng.dirichlet(np.ones(m))
            params = AnchorParams(float(rng.random()), float(rng.random()))
            brute = brute_force_pointwise_minimizer(BRIER, expected_anchor_weight(p, params)).values
            assert np.abs(brute - anchor_minimizer(p, params).values).sum() < 1e-3


class TestLambdaStar:
    def test_examples(self):
        assert lambda_star_bound(CE, 0.02, 1.0) == pytest.approx(0.2)
        assert lambda_star_bound(BRIER, 0.04, 1.0) == pytest.approx(0.2)
        assert lambda_star_bound(CE, 0.5, 1.0) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            lambda_star_bound(CE, 0.02, 0.0)
        with pytest.raises(ValueError):
            lambda_star_bound(CE, 0.0, 1.0)

    def test_monotone(self):
        eps = [0.001, 0.01, 0.05, 0.1]
        vals = [lambda_star_bound(CE, e, 2.0) for e in eps]
        assert vals == sorted(vals)
        gaps = [0.5, 1.0, 2.0, 4.0]
        vals = [lambda_star_bound(BRIER, 0.01, g) for g in gaps]
        assert vals == sorted(vals, reverse=True)


class TestRiskChurnBound:
    def test_examples(self):
        assert risk_churn_bound(CE, 0.1, 0.0, 0.3, 0.0) == pytest.approx(0.1)
        assert risk_churn_bound(CE, 0.1, 0.05, 0.2, 0.3, lipschitz_const=1.0, bound_B=2.0) == pytest.approx(0.81)
        assert risk_churn_bound(BRIER, 0.0, 0.0, 0.0, 0.0) == 0.0

    def test_defaults(self):
        assert risk_churn_bound(BRIER, 0.0, 0.0, 0.5, 0.1) == pytest.approx((2.0 + 4.0 * 0.5) * 0.1)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            risk_churn_bound(CE, -0.1, 0.0, 0.0, 0.0)


def test_brute_force_budget():
    start = time.perf_counter()
    brute_force_pointwise_minimizer(CE, np.ones(6) / 6, grid_step=0.02)
    assert time.perf_counter() - start < 10
