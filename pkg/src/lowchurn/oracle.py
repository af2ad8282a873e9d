"""Closed-form minimizers and brute-force checks used as ground truth.

Everything here is independent of the training code: the brute-force
minimizer searches the simplex directly, and the closed forms are evaluated
from their formulas without touching a model.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Callable

import numpy as np

from .simplex import ProbabilityVector, ScoringFunction, hard_argmax

MAX_GRID_POINTS = 5_000_000
LOCAL_POINTS = 50_000


@dataclass(frozen=True)
class AnchorParams:
    alpha: float
    eta: float

    def __post_init__(self):
        for name in ("alpha", "eta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"anchor {name} must lie in [0, 1], got {value}")


@dataclass
class SyntheticDistribution:
    """A data distribution with known class probabilities ``p(x)`` and base ``g(x)``.

    Both maps act on ``(n, d)`` feature arrays and return ``(n, m)`` arrays.
    ``sampler(rng, n)`` draws ``n`` feature vectors.
    """

    class_probability_fn: Callable[[np.ndarray], np.ndarray]
    base_fn: Callable[[np.ndarray], np.ndarray]
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    seed: int
    num_classes: int

    def sample_features(self, n: int, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return self.sampler(rng, n)

    def p(self, x) -> np.ndarray:
        return np.atleast_2d(self.class_probability_fn(np.atleast_2d(x)))

    def g(self, x) -> np.ndarray:
        return np.atleast_2d(self.base_fn(np.atleast_2d(x)))


def simplex_grid(m: int, grid_step: float) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of ``1/round(1/grid_step)``."""
    k = int(round(1.0 / grid_step))
    count = comb(k + m - 1, m - 1)
    if count > MAX_GRID_POINTS:
        raise ValueError(f"simplex grid with m={m}, step={grid_step} has {count} points")
    # rows of non-negative integer compositions of k into m parts
    counts = np.arange(k + 1, dtype=np.int64)[:, None]
    for _ in range(m - 2):
        used = counts.sum(axis=1)
        reps = k - used + 1
        prefix = np.repeat(counts, reps, axis=0)
        nxt = np.concatenate([np.arange(r) for r in reps])
        counts = np.hstack([prefix, nxt[:, None]])
    counts = np.hstack([counts, (k - counts.sum(axis=1))[:, None]])
    return counts / k


def _local_lattice(m: int, radius: int) -> np.ndarray:
    """Integer moves on the simplex lattice: free first m-1 coordinates, last absorbs."""
    axes = [np.arange(-radius, radius + 1)] * (m - 1)
    free = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m - 1)
    return np.hstack([free, -free.sum(axis=1, keepdims=True)]).astype(np.float64)


def brute_force_pointwise_minimizer(
    phi: ScoringFunction, weight, grid_step: float = 0.01, final_step: float = 1e-7
) -> ProbabilityVector:
    """Minimize ``v -> weight . phi(v)`` over the simplex by exhaustive search.

    A full simplex grid locates the basin; the winner is then refined by
    searching successively finer local lattices (each 5x finer) centred on
    the current best point, re-centring until the centre stops moving.
    """
    w = np.asarray(weight, dtype=np.float64).reshape(-1)
    m = w.size
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative and not all zero")
    if not 0.0 < grid_step <= 0.1:
        raise ValueError("grid_step must lie in (0, 0.1]")
    if m > 6 and grid_step < 0.02:
        raise ValueError("grid too fine for m > 6")

    grid = simplex_grid(m, grid_step)
    values = phi.weighted(w, grid)
    v = grid[int(np.argmin(values))].copy()
    best = float(values.min())

    radius = max(2, int((LOCAL_POINTS ** (1.0 / (m - 1)) - 1) // 2))
    moves = _local_lattice(m, min(radius, 10))
    step = grid_step
    while step > final_step:
        step /= 5.0
        for _ in range(100):
            cand = v + step * moves
            cand = cand[np.all(cand >= 0.0, axis=1)]
            vals = phi.weighted(w, cand)
            i = int(np.argmin(vals))
            if vals[i] >= best:
                break
            v, best = cand[i], float(vals[i])
    v = np.maximum(v, 0.0)
    return ProbabilityVector(v / v.sum())


def optimal_mixture_classifier(dist: SyntheticDistribution, lam: float, x) -> ProbabilityVector:
    """Pointwise minimizer of the distillation loss: ``lam * p(x) + (1 - lam) * g(x)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    mix = lam * dist.p(x)[0] + (1.0 - lam) * dist.g(x)[0]
    return ProbabilityVector(mix)


def anchor_weight(p, params: AnchorParams) -> np.ndarray:
    """Unnormalized minimizer ``z`` of the anchor loss when ``g = p``."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    j = int(hard_argmax(p[None, :])[0])
    z = (params.eta + params.alpha * p.max()) * p
    z[j] = params.alpha * p[j] ** 2 + (1.0 - params.alpha) * p[j]
    return z


def anchor_minimizer(p, params: AnchorParams) -> ProbabilityVector:
    z = anchor_weight(p, params)
    return ProbabilityVector(z / z.sum())


def lambda_star_bound(phi: ScoringFunction, epsilon: float, expected_gap: float) -> float:
    """Upper bound on the optimal mixing coefficient, capped at 1.

    ``expected_gap`` is ``E ||p(x) - g(x)||_q^2`` in the norm matching ``phi``
    (L1 for cross-entropy, L2 for Brier).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if expected_gap <= 0:
        raise ValueError("expected gap must be positive; g == p leaves lambda unconstrained")
    alpha, _ = phi.strong_concavity
    return float(min(1.0, np.sqrt(2.0 * epsilon / (alpha * expected_gap))))


def risk_churn_bound(
    phi: ScoringFunction,
    epsilon: float,
    churn_gen_slack: float,
    lambda_star: float,
    expected_l1_gap: float,
    lipschitz_const: float | None = None,
    bound_B: float | None = None,
) -> float:
    """Upper bound on the excess risk of the returned classifier over the best feasible one."""
    lip = phi.lipschitz if lipschitz_const is None else lipschitz_const
    b = phi.bound if bound_B is None else bound_B
    args = (epsilon, churn_gen_slack, lambda_star, expected_l1_gap, lip, b)
    if any(a < 0 for a in args):
        raise ValueError("all bound arguments must be non-negative")
    return epsilon + churn_gen_slack + (b + lip * lambda_star) * expected_l1_gap
