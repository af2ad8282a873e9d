import numpy as np
import pytest

from lowchurn import nn
from lowchurn.algorithm import (
    ChurnBudget,
    EnsembleWeights,
    LambdaGrid,
    ensemble_predictions,
    load_sweep,
    member_seed,
    run_algorithm_one,
    run_lambda_sweep,
    save_sweep,
    solve_convex_program,
    solve_ensemble_program,
    solve_from_sweep,
)
from lowchurn.data import make_synthetic
from lowchurn.nn import SoftTargetBatch, TrainConfig
from lowchurn.simplex import ScoringFunction, empirical_churn, empirical_risk, one_hot
from lowchurn.verification import grid_constrained_oracle

CE = ScoringFunction.cross_entropy()


def random_problem(rng, K, n=60, m=3):
    labels = rng.integers(0, m, size=n)
    base = rng.dirichlet(np.ones(m), size=n)
    stack = np.stack([rng.dirichlet(np.ones(m) * (k + 1), size=n) for k in range(K)])
    # one member close to the labels, one close to the base, so the budget matters
    stack[0] = 0.7 * one_hot(labels, m) + 0.3 * stack[0]
    if K > 1:
        stack[-1] = 0.9 * base + 0.1 * stack[-1]
    return stack, base, labels


def risk_churn(phi, stack, base, labels, alpha):
    mix = np.einsum("k,kij->ij", alpha, stack)
    return empirical_risk(phi, mix, labels), empirical_churn(phi, base, mix)


class TestGrid:
    def test_practical(self):
        assert LambdaGrid.practical().values == tuple(round(0.1 * k, 1) for k in range(1, 10))

    def test_theorem(self):
        eps, B = 0.1, 2.0
        grid = LambdaGrid.theorem(eps, B, 10)
        assert grid.values[0] == 0.1
        assert min(grid.values) >= eps / (eps + 2 * B)
        assert grid.values[-1] == 1.0
        small = LambdaGrid.theorem(0.5, 0.1, 4)
        assert small.values[0] == pytest.approx(0.5 / 0.7)

    @pytest.mark.parametrize("values", [(), (0.5, 0.5), (0.6, 0.4), (0.0, 0.5), (0.5, 1.2)])
    def test_invalid(self, values):
        with pytest.raises(ValueError):
            LambdaGrid(values)

    def test_budget(self):
        with pytest.raises(ValueError):
            ChurnBudget(0.0)


class TestEnsemble:
    def test_weights_validated(self):
        with pytest.raises(ValueError):
            EnsembleWeights(np.array([0.5, 0.6]))

    def test_predictions(self, rng):
        stack, base, labels = random_problem(rng, 2)

        class S:  # minimal stand-in exposing what ensemble_predictions reads
            grid = LambdaGrid((0.5, 1.0))
            cached_predictions = stack

        assert np.array_equal(ensemble_predictions(S, EnsembleWeights(np.array([0.0, 1.0]))), stack[1])
        S.cached_predictions = np.stack([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
        assert np.allclose(ensemble_predictions(S, EnsembleWeights(np.array([0.5, 0.5]))), [[0.5, 0.5]])

    def test_convexity_in_alpha(self, phi, rng):
        stack, base, labels = random_problem(rng, 4)
        for _ in range(20):
            a1, a2 = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
            r1, c1 = risk_churn(phi, stack, base, labels, a1)
            r2, c2 = risk_churn(phi, stack, base, labels, a2)
            rm, cm = risk_churn(phi, stack, base, labels, (a1 + a2) / 2)
            assert rm <= (r1 + r2) / 2 + 1e-9 and cm <= (c1 + c2) / 2 + 1e-9


class TestSolver:
    def test_single_member(self, rng):
        stack, base, labels = random_problem(rng, 1)
        sol = solve_convex_program(stack, base, labels, 10.0, CE)
        assert sol.feasible and sol.weights.alpha.tolist() == [1.0]

    def test_clone_and_infeasible_member(self, phi, rng):
        stack, base, labels = random_problem(rng, 2)
        stack[0] = stack[0] * 0.2 + one_hot(labels, 3) * 0.8
        stack[1] = base
        eps = 0.3 * risk_churn(phi, stack, base, labels, np.array([1.0, 0.0]))[1]
        sol = solve_convex_program(stack, base, labels, eps, phi)
        assert sol.feasible and sol.churn <= eps
        # dense line search oracle over the segment
        ts = np.linspace(0.0, 1.0, 20001)
        best = min(r for r, c in (risk_churn(phi, stack, base, labels, np.array([t, 1 - t])) for t in ts) if c <= eps)
        assert sol.risk <= best + 1e-9
        assert sol.risk <= risk_churn(phi, stack, base, labels, np.array([0.0, 1.0]))[0] + 1e-9

    @pytest.mark.parametrize("K", [2, 3])
    def test_unconstrained_matches_grid(self, phi, rng, K):
        stack, base, labels = random_problem(rng, K)
        sol = solve_convex_program(stack, base, labels, 1e6, phi)
        oracle, _ = grid_constrained_oracle(stack, base, labels, 1e6, phi)
        assert sol.feasible and sol.risk <= oracle + 1e-5

    def test_random_constrained_matches_grid(self, phi):
        rng = np.random.default_rng(77)
        for _ in range(20):
            K = int(rng.integers(2, 4))
            stack, base, labels = random_problem(rng, K)
            churns = [risk_churn(phi, stack, base, labels, np.eye(K)[k])[1] for k in range(K)]
            eps = float(rng.uniform(min(churns), max(churns)))
            sol = solve_convex_program(stack, base, labels, eps, phi)
            oracle, _ = grid_constrained_oracle(stack, base, labels, eps, phi)
            assert sol.feasible and sol.churn <= eps + 1e-6
            assert sol.risk <= oracle + 1e-4

    def test_infeasible_flag(self, rng):
        stack, base, labels = random_problem(rng, 2)
        stack[1] = 0.5 * stack[1] + 0.5 * one_hot(labels, 3)
        sol = solve_convex_program(stack, base, labels, 1e-9, CE)
        assert not sol.feasible
        _, c = risk_churn(CE, stack, base, labels, sol.weights.alpha)
        vertex_min = min(risk_churn(CE, stack, base, labels, np.eye(2)[k])[1] for k in range(2))
        assert c <= vertex_min + 1e-12

    def test_deterministic(self, rng):
        stack, base, labels = random_problem(rng, 3)
        a = solve_convex_program(stack, base, labels, 0.05, CE).weights.alpha
        b = solve_convex_program(stack, base, labels, 0.05, CE).weights.alpha
        assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def blob_task():
    ds, _ = make_synthetic("gaussian-blobs", 2, 2, 900, seed=21)
    x, y = ds.features, ds.labels
    val = SoftTargetBatch(x[100:200], one_hot(y[100:200], 2))
    cfg = TrainConfig(max_epochs=15, seed=3)
    base = nn.train(nn.init_cold((2, 10, 2), 50), SoftTargetBatch(x[:100], one_hot(y[:100], 2)), val, cfg, CE)
    return x[200:], y[200:], val, base, cfg


@pytest.fixture(scope="module")
def blob_sweep(blob_task):
    x, y, val, base, cfg = blob_task
    return run_lambda_sweep(x, y, val, base, LambdaGrid((0.2, 0.5, 0.9)), cfg, CE)


class TestSweep:
    def test_plain_erm(self, blob_task):
        x, y, val, base, cfg = blob_task
        sweep = run_lambda_sweep(x, y, val, base, LambdaGrid((1.0,)), cfg, CE)
        seed = member_seed(cfg.seed, 0)
        ref = nn.train(nn.init_cold(base.dims, seed), SoftTargetBatch(x, one_hot(y, 2)), val, TrainConfig(**{**cfg.__dict__, "seed": seed}), CE)
        assert np.array_equal(sweep.models[0].params, ref.params)

    def test_cache_coherent(self, blob_task, blob_sweep):
        x = blob_task[0]
        for model, cached in zip(blob_sweep.models, blob_sweep.cached_predictions):
            assert np.array_equal(nn.forward(model, x), cached)
        assert np.array_equal(nn.forward(blob_task[3], x), blob_sweep.cached_base)

    def test_single_best(self, blob_task, blob_sweep):
        base = blob_task[3]
        stats = blob_sweep.member_stats(CE)
        eps = sorted(c for _, c in stats)[1] + 1e-12
        _, report = solve_from_sweep(blob_sweep, base, ChurnBudget(eps), CE, "single-best")
        ok = [k for k, (_, c) in enumerate(stats) if c <= eps]
        assert report.feasible and report.chosen_index == min(ok, key=lambda k: stats[k][0])
        assert report.train_churn == pytest.approx(stats[report.chosen_index][1], abs=1e-12)

    def test_single_best_infeasible(self, blob_task, blob_sweep):
        _, report = solve_from_sweep(blob_sweep, blob_task[3], ChurnBudget(1e-12), CE, "single-best")
        churns = [c for _, c in blob_sweep.member_stats(CE)]
        assert not report.feasible and report.chosen_index == int(np.argmin(churns))

    def test_base_member_always_feasible(self, blob_task, blob_sweep):
        for eps in (1e-9, 1e-4, 0.01):
            _, report = solve_from_sweep(blob_sweep, blob_task[3], ChurnBudget(eps), CE, "ensemble", include_base=True)
            assert report.feasible and report.train_churn <= eps + 1e-6

    def test_ensemble_beats_single_best(self, blob_task, blob_sweep):
        base = blob_task[3]
        for eps in (0.005, 0.02, 0.1):
            _, single = solve_from_sweep(blob_sweep, base, ChurnBudget(eps), CE, "single-best", include_base=False)
            _, ens = solve_from_sweep(blob_sweep, base, ChurnBudget(eps), CE, "ensemble", include_base=False)
            if single.feasible and ens.feasible:
                assert ens.train_risk <= single.train_risk + 1e-9

    def test_ensemble_program_api(self, blob_sweep):
        weights, feasible = solve_ensemble_program(blob_sweep, ChurnBudget(0.05), CE, include_base=True)
        assert feasible and weights.alpha.size == 4

    def test_manifest_roundtrip(self, tmp_path, blob_task, blob_sweep):
        base, cfg = blob_task[3], blob_task[4]
        path = save_sweep(blob_sweep, base, CE, cfg, tmp_path / "sweep")
        assert path.name == "manifest.json"
        sweep2, base2, phi2, manifest = load_sweep(tmp_path / "sweep")
        assert phi2 == CE and manifest["grid"] == [0.2, 0.5, 0.9]
        assert np.array_equal(sweep2.cached_predictions, blob_sweep.cached_predictions)
        assert all(np.array_equal(a.params, b.params) for a, b in zip(sweep2.models, blob_sweep.models))
        _, r1 = solve_from_sweep(blob_sweep, base, ChurnBudget(0.02), CE)
        _, r2 = solve_from_sweep(sweep2, base2, ChurnBudget(0.02), CE)
        assert r1.to_dict() == r2.to_dict()

    def test_end_to_end_huge_budget(self, blob_task):
        x, y, val, base, cfg = blob_task
        clf, report, sweep = run_algorithm_one(x, y, val, base, LambdaGrid((1.0,)), ChurnBudget(1e6), cfg, CE, mode="single-best")
        assert report.feasible and report.chosen_index == 0
        assert np.array_equal(clf.predict(x), sweep.cached_predictions[0])


def test_churn_trend_over_lambda():
    """Lower lambda (more teacher weight) tends to give lower churn; checked as a majority over seeds."""
    ordered = total = 0
    for seed in range(5):
        ds, _ = make_synthetic("logistic-ground-truth", 3, 3, 700, seed=seed)
        x, y = ds.features, ds.labels
        val = SoftTargetBatch(x[100:200], one_hot(y[100:200], 3))
        cfg = TrainConfig(max_epochs=20, seed=seed)
        base = nn.train(nn.init_cold((3, 10, 3), seed + 100), SoftTargetBatch(x[:100], one_hot(y[:100], 3)), val, cfg, CE)
        sweep = run_lambda_sweep(x[200:], y[200:], val, base, LambdaGrid.practical(), cfg, CE)
        churns = [c for _, c in sweep.member_stats(CE)]
        ordered += sum(a <= b for a, b in zip(churns, churns[1:]))
        total += len(churns) - 1
    assert ordered > total / 2
