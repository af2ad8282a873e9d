"""Distillation-based churn reduction: lambda-grid training plus the ensemble program.

Step 1 trains one model per mixing coefficient on distilled labels, step 2
caches every member's predictions on the training sample, and step 3 picks
convex weights over the members minimizing empirical risk subject to the
empirical churn budget.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import MlpModel, SoftTargetBatch, TrainConfig
from .simplex import ScoringFunction, ScoringKind, as_prediction_matrix, one_hot
from .targets import DEFAULT_GRID, DistillConfig, distilled_targets

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "lowchurn-sweep"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ChurnBudget:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("churn budget must be positive")


@dataclass(frozen=True)
class LambdaGrid:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("grid needs at least one value")
        if any(not 0.0 < v <= 1.0 for v in vals):
            raise ValueError("grid values must lie in (0, 1]")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    @classmethod
    def practical(cls) -> "LambdaGrid":
        return cls(DEFAULT_GRID)

    @classmethod
    def theorem(cls, epsilon: float, bound_B: float, size: int) -> "LambdaGrid":
        """``{max(eps / (eps + 2B), k / L) : k = 1..L}`` with duplicates removed."""
        floor = epsilon / (epsilon + 2.0 * bound_B)
        vals = sorted({max(floor, k / size) for k in range(1, size + 1)})
        return cls(tuple(vals))


@dataclass
class LambdaSweep:
    grid: LambdaGrid
    models: list[MlpModel]
    cached_predictions: np.ndarray  # (L, n, m)
    cached_base: np.ndarray  # (n, m)
    labels: np.ndarray
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.cached_predictions = np.asarray(self.cached_predictions, dtype=np.float64)
        self.cached_base = as_prediction_matrix(self.cached_base)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        L, n, m = self.cached_predictions.shape
        if L != len(self.grid):
            raise ValueError(f"{L} cached members for a grid of {len(self.grid)}")
        if self.cached_base.shape != (n, m) or self.labels.shape != (n,):
            raise ValueError("cached base / labels do not match member caches")

    def member_stats(self, phi: ScoringFunction) -> list[tuple[float, float]]:
        """Per-member ``(empirical risk, empirical churn)`` on the training sample."""
        return [
            (
                float(np.mean(_risk_terms(phi, h, self.labels))),
                float(np.mean(_churn_terms(phi, self.cached_base, h))),
            )
            for h in self.cached_predictions
        ]


@dataclass(frozen=True)
class EnsembleWeights:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if a.size == 0 or np.any(a < -1e-12) or abs(a.sum() - 1.0) > 1e-9:
            raise ValueError(f"ensemble weights must lie on the simplex, got {a}")
        object.__setattr__(self, "alpha", a)


def _risk_terms(phi, h, labels):
    return phi.scores(h)[np.arange(labels.size), labels]


def _churn_terms(phi, g, h):
    return phi.weighted(g, h) - phi.weighted(g, g)


def member_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def run_lambda_sweep(
    features,
    labels,
    validation: SoftTargetBatch,
    base: MlpModel,
    grid: LambdaGrid,
    train_cfg: TrainConfig,
    phi: ScoringFunction,
    hidden_dim: int | None = None,
    warm_start: bool = False,
) -> LambdaSweep:
    """Train one distilled model per grid value and cache training-sample predictions."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    g = nn.forward(base, x)
    dims = (base.input_dim, hidden_dim or base.hidden_dim, base.num_classes)
    models, preds, seeds = [], [], []
    for k, lam in enumerate(grid):
        seed = member_seed(train_cfg.seed, k)
        cfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
        batch = SoftTargetBatch(x, distilled_targets(labels, g, DistillConfig(lam)))
        init = base.copy() if warm_start and dims == base.dims else nn.init_cold(dims, seed)
        try:
            model = nn.train(init, batch, validation, cfg, phi)
        except FloatingPointError as exc:
            raise RuntimeError(f"training failed for lambda={lam}") from exc
        log.debug("lambda=%s trained", lam)
        models.append(model)
        preds.append(nn.forward(model, x))
        seeds.append(seed)
    return LambdaSweep(grid, models, np.stack(preds), g, labels, seeds)


def ensemble_predictions(sweep: LambdaSweep, weights: EnsembleWeights) -> np.ndarray:
    alpha = weights.alpha
    if alpha.size != len(sweep.grid):
        raise ValueError(f"{alpha.size} weights for {len(sweep.grid)} members")
    return np.einsum("k,kij->ij", alpha, sweep.cached_predictions)


# -- the convex program -----------------------------------------------------


class _Program:
    """Risk and churn of ``sum_k alpha_k H_k`` as functions of ``alpha``."""

    def __init__(self, stack: np.ndarray, base: np.ndarray, labels: np.ndarray, phi: ScoringFunction):
        self.stack = stack
        self.base = base
        self.phi = phi
        self.onehot = one_hot(labels, stack.shape[2])
        self.n = stack.shape[1]
        self.base_const = float(np.mean(phi.weighted(base, base)))

    def mix(self, alpha):
        return np.einsum("k,kij->ij", alpha, self.stack)

    def risk(self, alpha) -> float:
        return float(np.mean(self.phi.weighted(self.onehot, self.mix(alpha))))

    def churn(self, alpha) -> float:
        return float(np.mean(self.phi.weighted(self.base, self.mix(alpha)))) - self.base_const

    def values(self, alpha):
        v = self.mix(alpha)
        r = float(np.mean(self.phi.weighted(self.onehot, v)))
        c = float(np.mean(self.phi.weighted(self.base, v))) - self.base_const
        return r, c, v

    def grads(self, v):
        gr = self.phi.weighted_grad(self.onehot, v)
        gc = self.phi.weighted_grad(self.base, v)
        return (
            np.einsum("ij,kij->k", gr, self.stack) / self.n,
            np.einsum("ij,kij->k", gc, self.stack) / self.n,
        )


def _eg_minimize(objective, alpha0: np.ndarray, max_iter: int = 3000, tol: float = 1e-13):
    """Exponentiated-gradient descent on the simplex with an adaptive step.

    ``objective(alpha)`` returns ``(value, gradient)``.  The step grows after
    each accepted move and halves on rejection, which acts as a line search.
    """
    alpha = alpha0.copy()
    value, grad = objective(alpha)
    eta = 1.0 / max(np.abs(grad).max(), 1e-12)
    for _ in range(max_iter):
        accepted = False
        for _ in range(40):
            logits = np.log(np.maximum(alpha, 1e-300)) - eta * (grad - grad.min())
            cand = np.exp(logits - logits.max())
            cand /= cand.sum()
            cval, cgrad = objective(cand)
            if cval <= value:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            break
        improvement = value - cval
        alpha, value, grad = cand, cval, cgrad
        eta *= 1.5
        if improvement <= tol * max(1.0, abs(value)):
            break
    return alpha, value


@dataclass
class ProgramSolution:
    weights: EnsembleWeights
    feasible: bool
    risk: float
    churn: float
    penalty: float


def solve_convex_program(
    stack: np.ndarray,
    base: np.ndarray,
    labels: np.ndarray,
    epsilon: float,
    phi: ScoringFunction,
    slack_tol: float = 1e-6,
    max_doublings: int = 50,
) -> ProgramSolution:
    """Minimize empirical risk over ``co(stack)`` subject to empirical churn <= epsilon.

    Exterior quadratic penalty with the penalty weight doubling until the
    constraint violation drops below ``slack_tol``; each penalized problem is
    solved by exponentiated gradient.  A final line search toward the
    minimum-churn point restores exact feasibility.  A multiplier bisection on
    the Lagrangian supplies a second candidate, and every feasible vertex is
    considered too; the lowest-risk feasible candidate wins.
    """
    stack = np.asarray(stack, dtype=np.float64)
    K = stack.shape[0]
    prog = _Program(stack, as_prediction_matrix(base), np.asarray(labels, dtype=np.int64), phi)

    vertex = [prog.values(np.eye(K)[k])[:2] for k in range(K)]

    def churn_obj(a):
        _, c, v = prog.values(a)
        return c, prog.grads(v)[1]

    start = np.eye(K)[int(np.argmin([c for _, c in vertex]))]
    if K > 1:
        alpha_c, min_churn = _eg_minimize(churn_obj, np.full(K, 1.0 / K))
        if min_churn > min(c for _, c in vertex):
            alpha_c, min_churn = start, min(c for _, c in vertex)
    else:
        alpha_c, min_churn = start, vertex[0][1]
    if min_churn > epsilon:
        r, c, _ = prog.values(alpha_c)
        return ProgramSolution(EnsembleWeights(alpha_c), False, r, c, np.inf)

    alpha = np.full(K, 1.0 / K)
    mu = 1.0
    for _ in range(max_doublings + 1):

        def penalized(a, mu=mu):
            r, c, v = prog.values(a)
            gr, gc = prog.grads(v)
            viol = max(0.0, c - epsilon)
            return r + mu * viol * viol, gr + 2.0 * mu * viol * gc

        alpha, _ = _eg_minimize(penalized, alpha)
        if prog.churn(alpha) - epsilon < slack_tol:
            break
        mu *= 2.0

    alpha = _repair(prog, alpha, alpha_c, epsilon)
    polished = _repair(prog, _lagrangian_polish(prog, epsilon, alpha), alpha_c, epsilon)
    candidates = [alpha, polished] + [np.eye(K)[k] for k in range(K) if vertex[k][1] <= epsilon]
    scored = [(prog.values(a)[:2], a) for a in candidates]
    feasible = [(r, c, a) for (r, c), a in scored if c <= epsilon]
    r, c, best = min(feasible, key=lambda t: t[0])
    return ProgramSolution(EnsembleWeights(best / best.sum()), True, r, c, mu)


def _lagrangian_polish(prog: _Program, epsilon: float, start: np.ndarray, max_bisections: int = 60) -> np.ndarray:
    """Bisect on the multiplier ``mu`` of ``R + mu * C`` until churn meets the budget.

    Large penalty weights make exponentiated gradient stall when members are
    nearly collinear; the multiplier needed here stays moderate, so each
    inner problem remains well conditioned.
    """
    K = start.size

    def solve(mu, a0):
        def objective(a):
            r, c, v = prog.values(a)
            gr, gc = prog.grads(v)
            return r + mu * c, gr + mu * gc

        return _eg_minimize(objective, a0, max_iter=5000, tol=1e-15)[0]

    uniform = np.full(K, 1.0 / K)
    a = solve(0.0, uniform)
    if prog.churn(a) <= epsilon:
        return a
    lo, hi = 0.0, 1.0
    a_hi = solve(hi, uniform)
    while prog.churn(a_hi) > epsilon and hi < 1e12:
        lo, hi = hi, hi * 4.0
        a_hi = solve(hi, a_hi)
    for _ in range(max_bisections):
        mid = np.sqrt(lo * hi) if lo > 0 else 0.5 * hi
        a_mid = solve(mid, a_hi)
        if prog.churn(a_mid) <= epsilon:
            hi, a_hi = mid, a_mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * hi:
            break
    return a_hi


def _repair(prog: _Program, alpha: np.ndarray, alpha_c: np.ndarray, epsilon: float) -> np.ndarray:
    """Move toward ``alpha_c`` just far enough to satisfy the churn budget."""
    if prog.churn(alpha) <= epsilon:
        return alpha
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if prog.churn((1.0 - mid) * alpha + mid * alpha_c) <= epsilon:
            hi = mid
        else:
            lo = mid
    return (1.0 - hi) * alpha + hi * alpha_c


def _member_stack(sweep: LambdaSweep, include_base: bool) -> np.ndarray:
    if include_base:
        return np.concatenate([sweep.cached_predictions, sweep.cached_base[None]], axis=0)
    return sweep.cached_predictions


def solve_ensemble_program(
    sweep: LambdaSweep, budget: ChurnBudget, phi: ScoringFunction, include_base: bool = False
) -> tuple[EnsembleWeights, bool]:
    """Weights over the sweep members (plus the base model last, if included)."""
    sol = solve_convex_program(_member_stack(sweep, include_base), sweep.cached_base, sweep.labels, budget.epsilon, phi)
    return sol.weights, sol.feasible


# -- end to end -------------------------------------------------------------


@dataclass
class ChurnReducedClassifier:
    """Convex combination of member models (the base model may be one of them)."""

    models: list[MlpModel]
    weights: np.ndarray

    def predict(self, features) -> np.ndarray:
        out = None
        for w, model in zip(self.weights, self.models):
            if w == 0.0:
                continue
            p = w * nn.forward(model, features)
            out = p if out is None else out + p
        return out


@dataclass
class AlgorithmReport:
    mode: str
    epsilon: float
    lambdas: list[float]
    member_risk: list[float]
    member_churn: list[float]
    weights: list[float]
    chosen_index: int | None
    feasible: bool
    include_base: bool
    train_risk: float
    train_churn: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def solve_from_sweep(
    sweep: LambdaSweep,
    base: MlpModel,
    budget: ChurnBudget,
    phi: ScoringFunction,
    mode: str = "ensemble",
    include_base: bool | None = None,
) -> tuple[ChurnReducedClassifier, AlgorithmReport]:
    """Step 3 on a finished sweep: no training happens here."""
    if mode not in ("ensemble", "single-best"):
        raise ValueError(f"unknown mode {mode!r}")
    if include_base is None:
        include_base = mode == "ensemble"
    stats = sweep.member_stats(phi)
    risks = [r for r, _ in stats]
    churns = [c for _, c in stats]
    members = list(sweep.models) + ([base] if include_base else [])
    stack = _member_stack(sweep, include_base)
    prog = _Program(stack, sweep.cached_base, sweep.labels, phi)

    if mode == "ensemble":
        sol = solve_convex_program(stack, sweep.cached_base, sweep.labels, budget.epsilon, phi)
        alpha, feasible, chosen = sol.weights.alpha, sol.feasible, None
    else:
        all_r = risks + ([prog.risk(np.eye(len(members))[-1])] if include_base else [])
        all_c = churns + ([0.0] if include_base else [])
        ok = [k for k, c in enumerate(all_c) if c <= budget.epsilon]
        feasible = bool(ok)
        chosen = min(ok, key=lambda k: all_r[k]) if ok else int(np.argmin(all_c))
        alpha = np.eye(len(members))[chosen]
    r, c, _ = prog.values(alpha)
    report = AlgorithmReport(
        mode=mode,
        epsilon=budget.epsilon,
        lambdas=list(sweep.grid.values),
        member_risk=risks,
        member_churn=churns,
        weights=[float(a) for a in alpha],
        chosen_index=chosen,
        feasible=feasible,
        include_base=include_base,
        train_risk=r,
        train_churn=c,
    )
    return ChurnReducedClassifier(members, alpha), report


def run_algorithm_one(
    features,
    labels,
    validation: SoftTargetBatch,
    base: MlpModel,
    grid: LambdaGrid,
    budget: ChurnBudget,
    train_cfg: TrainConfig,
    phi: ScoringFunction,
    mode: str = "ensemble",
    include_base: bool | None = None,
    hidden_dim: int | None = None,
):
    """Train the sweep and solve step 3; returns ``(classifier, report, sweep)``."""
    sweep = run_lambda_sweep(features, labels, validation, base, grid, train_cfg, phi, hidden_dim)
    clf, report = solve_from_sweep(sweep, base, budget, phi, mode, include_base)
    return clf, report, sweep


# -- sweep artifacts --------------------------------------------------------


def phi_to_dict(phi: ScoringFunction) -> dict:
    return {"kind": phi.kind.value, "clip_floor": phi.clip_floor}


def phi_from_dict(doc: dict) -> ScoringFunction:
    return ScoringFunction(ScoringKind(doc["kind"]), float(doc.get("clip_floor", 1e-12)))


def save_sweep(sweep: LambdaSweep, base: MlpModel, phi: ScoringFunction, train_cfg: TrainConfig, directory) -> Path:
    """Write one checkpoint per member, the base, cached predictions and ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_model(base, out / "base.json")
    stats = sweep.member_stats(phi)
    members = []
    for k, (lam, model) in enumerate(zip(sweep.grid, sweep.models)):
        name = f"member_{k:03d}.json"
        nn.save_model(model, out / name)
        members.append(
            {
                "index": k,
                "lambda": lam,
                "checkpoint": name,
                "seed": sweep.seeds[k] if sweep.seeds else None,
                "empirical_risk": stats[k][0],
                "empirical_churn": stats[k][1],
            }
        )
    np.savez(
        out / "predictions.npz",
        members=sweep.cached_predictions.astype("<f8"),
        base=sweep.cached_base.astype("<f8"),
        labels=sweep.labels.astype("<i8"),
    )
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "grid": list(sweep.grid.values),
        "scoring": phi_to_dict(phi),
        "train_config": dict(train_cfg.__dict__),
        "base_checkpoint": "base.json",
        "predictions": "predictions.npz",
        "members": members,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "manifest.json"


def load_sweep(directory) -> tuple[LambdaSweep, MlpModel, ScoringFunction, dict]:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA or manifest.get("version") != MANIFEST_VERSION:
        raise ValueError("unrecognized sweep manifest")
    with np.load(root / manifest["predictions"]) as data:
        members, base_pred, labels = data["members"], data["base"], data["labels"]
    models = [nn.load_model(root / m["checkpoint"]) for m in manifest["members"]]
    sweep = LambdaSweep(
        LambdaGrid(tuple(manifest["grid"])),
        models,
        members,
        base_pred,
        labels,
        [m["seed"] for m in manifest["members"]],
    )
    base = nn.load_model(root / manifest["base_checkpoint"])
    return sweep, base, phi_from_dict(manifest["scoring"]), manifest
