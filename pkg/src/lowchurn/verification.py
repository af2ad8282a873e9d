"""Executable checks tying trained artifacts and solvers to the closed-form oracles.

Each check returns a :class:`CheckOutcome`; ``run_suite`` runs the default
battery at desk-scale sizes and ``write_outcomes`` stores the result as JSON.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .algorithm import (
    AlgorithmReport,
    ChurnBudget,
    LambdaGrid,
    LambdaSweep,
    _member_stack,
    run_algorithm_one,
)
from .data import make_synthetic
from .nn import SoftTargetBatch, TrainConfig
from .oracle import (
    AnchorParams,
    SyntheticDistribution,
    anchor_minimizer,
    brute_force_pointwise_minimizer,
    lambda_star_bound,
    simplex_grid,
)
from .simplex import ScoringFunction, divergences, hard_argmax, one_hot
from .targets import anchor_targets

# one entry per contract; the suite summary is keyed by these
CONTRACTS = {
    "distillation-pointwise": "optimal classifier: the distillation minimizer is lambda*p + (1-lambda)*g",
    "anchor-bias": "anchor loss: minimizer moves away from the base scores at the base argmax",
    "feasibility": "churn-constrained solution: training churn <= epsilon when flagged feasible",
    "solver-optimality": "ensemble program: solver risk matches a dense-grid constrained oracle",
    "lambda-star": "optimal mixing coefficient: admissible lambda <= sqrt(2 eps / (alpha E||p-g||_q^2))",
}


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    measured: float
    tolerance: float
    reference: str
    skipped: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("measured", "tolerance"):
            if not math.isfinite(d[k]):
                d[k] = None
        return d


def _skip(name: str, contract: str, reason: str) -> CheckOutcome:
    return CheckOutcome(name, True, math.nan, math.nan, CONTRACTS[contract], skipped=True, details={"reason": reason})


def _random_simplex(rng, m: int) -> np.ndarray:
    return rng.dirichlet(np.ones(m))


def check_distillation_pointwise(phi: ScoringFunction, trials: int = 100, seed: int = 0, tol: float = 1e-3) -> CheckOutcome:
    """Random ``(p, g, lambda)`` with ``m`` in {2, 3, 4}: brute force must land on the mixture."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    worst, fails = 0.0, 0
    for _ in range(trials):
        m = int(rng.integers(2, 5))
        p, g, lam = _random_simplex(rng, m), _random_simplex(rng, m), float(rng.random())
        target = lam * p + (1.0 - lam) * g
        err = float(np.abs(brute_force_pointwise_minimizer(phi, target).values - target).sum())
        worst = max(worst, err)
        fails += err > tol
    return CheckOutcome(
        f"distillation-pointwise[{phi.kind.value}]", fails == 0, worst, tol,
        CONTRACTS["distillation-pointwise"], details={"trials": trials, "failures": fails},
    )


def expected_anchor_weight(p, params: AnchorParams) -> np.ndarray:
    """``E_y[target(y)]`` for ``y ~ p`` with base ``g = p``, built from the training targets."""
    p = np.asarray(p, dtype=np.float64)
    m = p.size
    rows = anchor_targets(np.arange(m), np.tile(p, (m, 1)), params)
    return p @ rows


def check_anchor_bias(
    phi: ScoringFunction, trials: int = 100, seed: int = 0, params: AnchorParams = AnchorParams(1.0, 1.0), tol: float = 1e-3
) -> CheckOutcome:
    """Closed form vs brute force of the expanded anchor objective, plus the bias direction.

    Hard ``p`` and ``alpha = 0`` carry no bias by construction and are skipped.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    name = f"anchor-bias[{phi.kind.value}]"
    if params.alpha == 0.0:
        return _skip(name, "anchor-bias", "alpha = 0 ignores the base model")
    rng = np.random.default_rng(seed)
    worst, fails, used = 0.0, 0, 0
    min_gap = math.inf
    for _ in range(trials):
        m = int(rng.integers(2, 5))
        p = _random_simplex(rng, m)
        if p.max() >= 1.0 - 1e-9:
            continue
        used += 1
        closed = anchor_minimizer(p, params).values
        brute = brute_force_pointwise_minimizer(phi, expected_anchor_weight(p, params)).values
        distilled = brute_force_pointwise_minimizer(phi, p).values
        j = int(hard_argmax(p[None])[0])
        err = float(np.abs(closed - brute).sum())
        gap = float(np.abs(closed - p).sum())
        worst = max(worst, err)
        min_gap = min(min_gap, gap)
        ok = err <= tol and gap > 1e-6 and closed[j] < p[j] and np.abs(distilled - p).sum() <= tol
        fails += not ok
    if used == 0:
        return _skip(name, "anchor-bias", "every sampled p was hard")
    return CheckOutcome(
        name, fails == 0, worst, tol, CONTRACTS["anchor-bias"],
        details={"trials": used, "failures": fails, "min_gap_l1": min_gap},
    )


def check_feasibility_contract(
    sweep: LambdaSweep,
    report: AlgorithmReport,
    phi: ScoringFunction,
    test_predictions=None,
    test_base=None,
    tol: float = 1e-6,
) -> CheckOutcome:
    """Recompute training churn from cached member predictions and the reported weights.

    Test-sample churn (if given) is reported as the excess over epsilon; it is
    not asserted since the generalization slack is unknown.
    """
    name = f"feasibility[{report.mode},eps={report.epsilon}]"
    if not report.feasible:
        return _skip(name, "feasibility", "run was not flagged feasible")
    stack = _member_stack(sweep, report.include_base)
    mix = np.einsum("k,kij->ij", np.asarray(report.weights), stack)
    churn = float(np.mean(divergences(phi, sweep.cached_base, mix)))
    details = {"training_churn": churn, "reported_churn": report.train_churn}
    if test_predictions is not None:
        test_churn = float(np.mean(divergences(phi, test_base, test_predictions)))
        details["test_churn"] = test_churn
        details["test_slack"] = test_churn - report.epsilon
    passed = churn <= report.epsilon + tol and abs(churn - report.train_churn) <= 1e-9
    return CheckOutcome(name, passed, churn, report.epsilon + tol, CONTRACTS["feasibility"], details=details)


def grid_constrained_oracle(stack, base, labels, epsilon: float, phi: ScoringFunction, coarse: float = 0.01, fine: float = 2e-4):
    """Minimum empirical risk over convex weights with churn <= epsilon, by grid search.

    A coarse simplex grid is followed by a fine lattice around the best
    feasible coarse point.  Returns ``(risk, weights)`` or ``(inf, None)``.
    """
    stack = np.asarray(stack, dtype=np.float64)
    K, n, m = stack.shape
    e = one_hot(labels, m)
    base_const = float(np.mean(phi.weighted(base, base)))

    def evaluate(weights):
        risks, churns = [], []
        for chunk in np.array_split(weights, max(1, len(weights) // 256)):
            mix = np.einsum("gk,kij->gij", chunk, stack)
            risks.append(phi.weighted(e[None], mix).mean(axis=1))
            churns.append(phi.weighted(base[None], mix).mean(axis=1) - base_const)
        return np.concatenate(risks), np.concatenate(churns)

    def best_of(weights):
        r, c = evaluate(weights)
        r = np.where(c <= epsilon, r, np.inf)
        i = int(np.argmin(r))
        return float(r[i]), weights[i]

    risk, w = best_of(simplex_grid(K, coarse))
    if not math.isfinite(risk):
        return math.inf, None
    span = int(round(coarse / fine))
    axes = [np.arange(-span, span + 1)] * (K - 1)
    free = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, K - 1) * fine
    local = w + np.hstack([free, -free.sum(axis=1, keepdims=True)])
    local = local[np.all(local >= 0.0, axis=1)]
    r2, w2 = best_of(local)
    return (r2, w2) if r2 < risk else (risk, w)


def check_solver_optimality(
    sweep: LambdaSweep, report: AlgorithmReport, phi: ScoringFunction, tol: float = 1e-4
) -> CheckOutcome:
    """Ensemble solver risk must not exceed the grid oracle's by more than ``tol`` (three or fewer weights)."""
    name = f"solver-optimality[eps={report.epsilon}]"
    stack = _member_stack(sweep, report.include_base)
    if stack.shape[0] > 3:
        return _skip(name, "solver-optimality", "grid oracle limited to three weights")
    oracle_risk, _ = grid_constrained_oracle(stack, sweep.cached_base, sweep.labels, report.epsilon, phi)
    if not math.isfinite(oracle_risk):
        passed = not report.feasible
        return CheckOutcome(name, passed, math.nan, tol, CONTRACTS["solver-optimality"], details={"oracle": "infeasible"})
    gap = report.train_risk - oracle_risk
    return CheckOutcome(
        name, report.feasible and gap <= tol, gap, tol, CONTRACTS["solver-optimality"],
        details={"solver_risk": report.train_risk, "oracle_risk": oracle_risk},
    )


def check_lambda_star_bound(
    dist: SyntheticDistribution, phi: ScoringFunction, epsilon: float, n_mc: int = 10_000, seed: int | None = None
) -> CheckOutcome:
    """Largest admissible lambda on a 0.001 grid vs the closed-form bound (3 sigma Monte-Carlo slack)."""
    name = f"lambda-star[{phi.kind.value},eps={epsilon}]"
    x = dist.sample_features(n_mc, seed)
    p, g = dist.p(x), dist.g(x)
    alpha, q = phi.strong_concavity
    diff = np.abs(p - g)
    gaps = diff.sum(axis=1) ** 2 if q == 1 else (diff**2).sum(axis=1)
    mean_gap = float(gaps.mean())
    if mean_gap <= 1e-12:
        return _skip(name, "lambda-star", "g equals p on the sample")
    se = float(gaps.std(ddof=1) / math.sqrt(n_mc))
    lams = np.round(np.arange(1001) * 0.001, 3)
    admissible = 0.0
    # churn of the mixture grows with lambda, so scan upward
    for lam in lams[1:]:
        churn = float(np.mean(divergences(phi, g, lam * p + (1.0 - lam) * g)))
        if churn > epsilon:
            break
        admissible = float(lam)
    bound = lambda_star_bound(phi, epsilon, mean_gap)
    slack_bound = lambda_star_bound(phi, epsilon, max(mean_gap - 3.0 * se, 1e-300))
    return CheckOutcome(
        name, admissible <= slack_bound, admissible, slack_bound, CONTRACTS["lambda-star"],
        details={"bound": bound, "mean_gap": mean_gap, "gap_se": se, "n_mc": n_mc},
    )


def blobs_feasibility_run(seed: int, epsilon: float = 0.05, n: int = 2000, hidden: int = 10, grid=(0.2, 0.5, 0.9), mode="ensemble"):
    """Train a base model and a lambda sweep on two-class blobs; returns ``(sweep, report, phi)``."""
    phi = ScoringFunction.cross_entropy()
    ds, _ = make_synthetic("gaussian-blobs", 2, 2, n + 400, seed)
    x, y = ds.features, ds.labels
    init, val, train = slice(0, 200), slice(200, 400), slice(400, None)
    validation = SoftTargetBatch(x[val], one_hot(y[val], 2))
    cfg = TrainConfig(max_epochs=30, seed=seed)
    base = nn.train(nn.init_cold((2, hidden, 2), seed + 10_000), SoftTargetBatch(x[init], one_hot(y[init], 2)), validation, cfg, phi)
    _, report, sweep = run_algorithm_one(
        x[train], y[train], validation, base, LambdaGrid(tuple(grid)), ChurnBudget(epsilon), cfg, phi, mode=mode, include_base=False
    )
    return sweep, report, phi


def run_suite(seed: int = 0, trials: int = 100, feasibility_seeds: int = 1) -> list[CheckOutcome]:
    outcomes: list[CheckOutcome] = []
    for phi in (ScoringFunction.cross_entropy(), ScoringFunction.brier()):
        outcomes.append(check_distillation_pointwise(phi, trials, seed))
        outcomes.append(check_anchor_bias(phi, trials, seed + 1))
    for s in range(seed, seed + feasibility_seeds):
        sweep, report, phi = blobs_feasibility_run(s)
        outcomes.append(check_feasibility_contract(sweep, report, phi))
        outcomes.append(check_solver_optimality(sweep, report, phi))
    for k in range(2):
        _, dist = make_synthetic("logistic-ground-truth", 3, 3, 1, seed + 100 + k)
        for phi in (ScoringFunction.cross_entropy(), ScoringFunction.brier()):
            outcomes.append(check_lambda_star_bound(dist, phi, 0.02, 10_000, seed))
    return outcomes


def summarize(outcomes: list[CheckOutcome]) -> dict:
    by_contract: dict[str, dict] = {}
    for key, text in CONTRACTS.items():
        mine = [o for o in outcomes if o.reference == text]
        if mine:
            by_contract[key] = {
                "reference": text,
                "checks": len(mine),
                "skipped": sum(o.skipped for o in mine),
                "passed": all(o.passed for o in mine),
            }
    return {"passed": all(o.passed for o in outcomes), "contracts": by_contract}


def write_outcomes(outcomes: list[CheckOutcome], path, elapsed: float | None = None) -> None:
    doc = {"summary": summarize(outcomes), "outcomes": [o.to_dict() for o in outcomes]}
    if elapsed is not None:
        doc["elapsed_seconds"] = round(elapsed, 3)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def timed_suite(**kwargs) -> tuple[list[CheckOutcome], float]:
    start = time.perf_counter()
    outcomes = run_suite(**kwargs)
    return outcomes, time.perf_counter() - start
