"""Multi-baseline churn experiments, churn-at-cold-accuracy selection and Pareto frontiers."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import nn
from .algorithm import ChurnBudget, LambdaGrid, run_lambda_sweep, solve_from_sweep
from .data import Dataset, load_csv_dataset, make_synthetic
from .nn import SoftTargetBatch, TrainConfig
from .oracle import AnchorParams
from .simplex import ScoringFunction, ScoringKind, accuracy, empirical_churn, hard_churn, one_hot
from .targets import (
    DEFAULT_ANCHOR_ETAS,
    DEFAULT_GRID,
    CoDistillConfig,
    DistillConfig,
    MixupConfig,
    anchor_targets,
    co_distill_train,
    distilled_targets,
    mixup_source,
    smoothed_targets,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA = "lowchurn-report"
REPORT_VERSION = 1
WORKERS_ENV = "LOWCHURN_WORKERS"

# grid parameter(s) per method; anything else in a method block is an option
METHOD_GRIDS: dict[str, dict[str, tuple]] = {
    "cold": {},
    "warm": {},
    "shrink_perturb": {"alpha": DEFAULT_GRID},
    "mixup": {"alpha": DEFAULT_GRID},
    "label_smoothing": {"alpha": DEFAULT_GRID},
    "codistill": {"alpha": DEFAULT_GRID},
    "anchor": {"alpha": DEFAULT_GRID, "eta": DEFAULT_ANCHOR_ETAS},
    "distill": {"lambda": DEFAULT_GRID},
    "churn_constrained": {"epsilon": (0.01, 0.02, 0.05, 0.1)},
}


@dataclass
class SplitSpec:
    initial_size: int = 1000
    batch_size: int = 1000
    validation_size: int = 100
    test_fraction: float = 1.0 / 3.0


@dataclass
class ExperimentPlan:
    name: str = "experiment"
    seed: int = 0
    num_trials: int = 1
    dataset: dict = field(default_factory=lambda: {"source": "synthetic", "kind": "gaussian-blobs"})
    split: SplitSpec = field(default_factory=SplitSpec)
    hidden_dim: int = 10
    scoring: str = "cross_entropy"
    clip_floor: float = 1e-12
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: dict[str, dict] = field(default_factory=lambda: {"cold": {}})

    def __post_init__(self):
        if isinstance(self.split, dict):
            self.split = SplitSpec(**self.split)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.methods = {k: dict(v or {}) for k, v in (self.methods or {}).items()}
        if self.num_trials < 1:
            raise ValueError("num_trials must be at least 1")
        unknown = set(self.methods) - set(METHOD_GRIDS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        ScoringKind(self.scoring)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentPlan":
        doc = dict(doc)
        model = doc.pop("model", None)
        if model is not None:
            doc.setdefault("hidden_dim", model.get("hidden_dim", 10))
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        path = Path(path)
        plan = cls.from_dict(yaml.safe_load(path.read_text()) or {})
        src = plan.dataset.get("path")
        if src and not Path(src).is_absolute():
            plan.dataset["path"] = str((path.parent / src).resolve())
        return plan

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def phi(self) -> ScoringFunction:
        return ScoringFunction(ScoringKind(self.scoring), self.clip_floor)


@dataclass
class MethodRecord:
    method: str
    hyperparameters: dict
    accuracy: list[float] = field(default_factory=list)
    hard_churn: list[float] = field(default_factory=list)
    soft_churn: list[float] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def key(self) -> str:
        return method_key(self.method, self.hyperparameters)

    @staticmethod
    def _mean_se(values) -> tuple[float, float]:
        v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
        if v.size == 0:
            return math.nan, math.nan
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return float(v.mean()), se

    def summary(self) -> dict:
        acc, acc_se = self._mean_se(self.accuracy)
        hc, hc_se = self._mean_se(self.hard_churn)
        sc, sc_se = self._mean_se(self.soft_churn)
        return {
            "mean_accuracy": acc,
            "se_accuracy": acc_se,
            "mean_hard_churn": hc,
            "se_hard_churn": hc_se,
            "mean_soft_churn": sc,
            "se_soft_churn": sc_se,
        }

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "hyperparameters": self.hyperparameters,
            "accuracy": self.accuracy,
            "hard_churn": self.hard_churn,
            "soft_churn": self.soft_churn,
            "failures": self.failures,
            **self.summary(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MethodRecord":
        return cls(doc["method"], doc["hyperparameters"], doc["accuracy"], doc["hard_churn"], doc["soft_churn"], doc.get("failures", []))


def method_key(method: str, hyperparameters: dict) -> str:
    if not hyperparameters:
        return method
    inner = ",".join(f"{k}={hyperparameters[k]}" for k in sorted(hyperparameters))
    return f"{method}[{inner}]"


@dataclass
class ExperimentReport:
    plan: dict
    base: MethodRecord
    records: list[MethodRecord]
    selection: dict = field(default_factory=dict)
    frontier: list[dict] = field(default_factory=list)
    method_frontiers: dict = field(default_factory=dict)

    def record(self, method: str, **hyperparameters) -> MethodRecord:
        key = method_key(method, hyperparameters)
        for r in self.records:
            if r.key == key:
                return r
        raise KeyError(key)

    def by_method(self) -> dict[str, list[MethodRecord]]:
        out: dict[str, list[MethodRecord]] = {}
        for r in self.records:
            out.setdefault(r.method, []).append(r)
        return out

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "plan": self.plan,
            "base": self.base.to_dict(),
            "records": [r.to_dict() for r in self.records],
            "churn_at_cold_accuracy": self.selection,
            "frontier": self.frontier,
            "method_frontiers": self.method_frontiers,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        if doc.get("schema") != REPORT_SCHEMA:
            raise ValueError("not an experiment report")
        return cls(
            doc["plan"],
            MethodRecord.from_dict(doc["base"]),
            [MethodRecord.from_dict(r) for r in doc["records"]],
            doc.get("churn_at_cold_accuracy", {}),
            doc.get("frontier", []),
            doc.get("method_frontiers", {}),
        )

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# -- selection and frontiers ------------------------------------------------


def pareto_frontier(points) -> list[tuple[float, float]]:
    """Non-dominated ``(accuracy, churn)`` points, sorted by accuracy.

    A point is dominated when another has accuracy >= and churn <= with at
    least one strict.  Exact duplicates are reported once.
    """
    pts = sorted({(float(a), float(c)) for a, c in points}, key=lambda p: (-p[0], p[1]))
    if not pts:
        raise ValueError("no points")
    front = []
    best_churn = math.inf
    for a, c in pts:
        if c < best_churn:
            front.append((a, c))
            best_churn = c
    return sorted(front)


def churn_at_cold_accuracy(report: ExperimentReport, cold_method: str = "cold") -> dict:
    """Per method: lowest mean hard churn among settings at least as accurate as cold start.

    Methods with no qualifying setting map to ``None``.  Settings tied on
    churn are all listed under ``ties``.
    """
    groups = report.by_method()
    if cold_method not in groups:
        raise ValueError("report has no cold-start record")
    cold_acc = groups[cold_method][0].summary()["mean_accuracy"]
    out = {}
    for method, records in groups.items():
        qualifying = []
        for r in records:
            s = r.summary()
            if math.isfinite(s["mean_accuracy"]) and s["mean_accuracy"] >= cold_acc:
                qualifying.append((s["mean_hard_churn"], r, s))
        if not qualifying:
            out[method] = None
            continue
        churn, best, s = min(qualifying, key=lambda t: t[0])
        out[method] = {
            "hyperparameters": best.hyperparameters,
            "mean_accuracy": s["mean_accuracy"],
            "mean_hard_churn": churn,
            "cold_accuracy": cold_acc,
            "ties": [r.hyperparameters for c, r, _ in qualifying if c == churn and r is not best],
        }
    return out


def _frontiers(records: list[MethodRecord]) -> tuple[list[dict], dict]:
    pts = []
    for r in records:
        s = r.summary()
        if math.isfinite(s["mean_accuracy"]) and math.isfinite(s["mean_hard_churn"]):
            pts.append((s["mean_accuracy"], s["mean_hard_churn"], r))
    overall = []
    if pts:
        front = set(pareto_frontier([(a, c) for a, c, _ in pts]))
        overall = [
            {"method": r.method, "hyperparameters": r.hyperparameters, "accuracy": a, "hard_churn": c}
            for a, c, r in sorted(pts, key=lambda t: (t[0], t[1], t[2].key))
            if (a, c) in front
        ]
    per_method = {}
    for method in dict.fromkeys(r.method for _, _, r in pts):
        mp = [(a, c) for a, c, r in pts if r.method == method]
        per_method[method] = [{"accuracy": a, "hard_churn": c} for a, c in pareto_frontier(mp)]
    return overall, per_method


# -- running ----------------------------------------------------------------


def derive_seed(*parts) -> int:
    ints = [p if isinstance(p, int) else int.from_bytes(str(p).encode()[:8].ljust(8, b"\0"), "little") for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def load_plan_dataset(plan: ExperimentPlan) -> Dataset:
    cfg = dict(plan.dataset)
    source = cfg.get("source", "synthetic")
    if source == "csv":
        return load_csv_dataset(cfg["path"], cfg["label_column"], cfg.get("one_hot_policy", "one-hot"))
    if source == "synthetic":
        ds, _ = make_synthetic(
            cfg.get("kind", "gaussian-blobs"),
            int(cfg.get("dims", 2)),
            int(cfg.get("num_classes", 2)),
            int(cfg.get("n", 3000)),
            int(cfg.get("seed", plan.seed)),
            float(cfg.get("base_noise", 0.5)),
        )
        return ds
    raise ValueError(f"unknown dataset source {source!r}")


@dataclass
class TrialData:
    x_init: np.ndarray
    y_init: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    validation: SoftTargetBatch
    x_test: np.ndarray
    y_test: np.ndarray


def prepare_features(plan: ExperimentPlan, ds: Dataset):
    rng = np.random.default_rng(derive_seed(plan.seed, "test-split"))
    order = rng.permutation(len(ds))
    n_test = int(round(plan.split.test_fraction * len(ds)))
    test_idx, pool = order[:n_test], order[n_test:]
    sp = plan.split
    need = sp.initial_size + sp.batch_size + sp.validation_size
    if need > pool.size:
        raise ValueError(f"plan needs {need} training rows, only {pool.size} available")
    if n_test == 0:
        raise ValueError("test split is empty")
    x = ds.features
    if plan.dataset.get("standardize", True):
        mu = x[pool].mean(axis=0)
        sd = x[pool].std(axis=0)
        x = (x - mu) / np.where(sd > 0, sd, 1.0)
    return x, ds.labels, test_idx, pool


def trial_split(plan, x, y, test_idx, pool, trial, m) -> TrialData:
    sp = plan.split
    rng = np.random.default_rng(derive_seed(plan.seed, "trial", trial))
    idx = rng.permutation(pool)
    init = idx[: sp.initial_size]
    val = idx[sp.initial_size : sp.initial_size + sp.validation_size]
    batch = idx[sp.initial_size + sp.validation_size : sp.initial_size + sp.validation_size + sp.batch_size]
    train = np.concatenate([init, batch])
    return TrialData(
        x[init], y[init], x[train], y[train],
        SoftTargetBatch(x[val], one_hot(y[val], m)),
        x[test_idx], y[test_idx],
    )


def _grid_settings(method: str, options: dict) -> tuple[list[dict], dict]:
    grids = METHOD_GRIDS[method]
    values = {k: tuple(options.get(k, default)) for k, default in grids.items()}
    extras = {k: v for k, v in options.items() if k not in grids}
    names = list(values)
    settings = [dict(zip(names, combo)) for combo in itertools.product(*(values[k] for k in names))]
    return settings, extras


def _evaluate(predict, base_test, td: TrialData, phi) -> tuple[float, float, float]:
    p = predict(td.x_test)
    return accuracy(p, td.y_test), hard_churn(base_test, p), empirical_churn(phi, base_test, p)


def _run_trial(plan: ExperimentPlan, trial: int, x, y, test_idx, pool, m) -> dict:
    td = trial_split(plan, x, y, test_idx, pool, trial, m)
    phi = plan.phi
    dims = (x.shape[1], plan.hidden_dim, m)
    base_seed = derive_seed(plan.seed, trial, "base")
    cand_seed = derive_seed(plan.seed, trial, "candidate")
    base_cfg = TrainConfig(**{**plan.train.__dict__, "seed": base_seed})
    cand_cfg = TrainConfig(**{**plan.train.__dict__, "seed": cand_seed})
    base = nn.train(
        nn.init_cold(dims, base_seed), SoftTargetBatch(td.x_init, one_hot(td.y_init, m)), td.validation, base_cfg, phi
    )
    base_test = nn.forward(base, td.x_test)
    g_train = nn.forward(base, td.x_train)
    onehot_train = one_hot(td.y_train, m)
    results: dict[str, Any] = {
        "base": (accuracy(base_test, td.y_test), 0.0, 0.0),
    }

    def init_for(extras):
        return base.copy() if extras.get("init", "cold") == "warm" else nn.init_cold(dims, cand_seed)

    def cfg_for(extras):
        if "max_epochs" in extras:
            return TrainConfig(**{**cand_cfg.__dict__, "max_epochs": int(extras["max_epochs"])})
        return cand_cfg

    def fit(targets, extras, subnormalized=False, init=None, **kw):
        batch = SoftTargetBatch(td.x_train, targets, subnormalized)
        model = nn.train(init if init is not None else init_for(extras), batch, td.validation, cfg_for(extras), phi, **kw)
        return model.predict

    for method in plan.methods:
        settings, extras = _grid_settings(method, plan.methods[method])
        sweep = None
        for hp in settings:
            key = method_key(method, hp)
            try:
                if method == "cold":
                    predict = fit(onehot_train, extras, init=nn.init_cold(dims, cand_seed))
                elif method == "warm":
                    predict = fit(onehot_train, extras, init=base.copy())
                elif method == "shrink_perturb":
                    predict = fit(onehot_train, extras, init=nn.init_shrink_perturb(base, hp["alpha"], cand_seed))
                elif method == "mixup":
                    source = mixup_source(td.x_train, onehot_train, MixupConfig(hp["alpha"]), cand_seed, cand_cfg.batch_size)
                    predict = fit(onehot_train, extras, batch_source=source)
                elif method == "label_smoothing":
                    predict = fit(smoothed_targets(td.y_train, g_train, hp["alpha"]), extras)
                elif method == "anchor":
                    t = anchor_targets(td.y_train, g_train, AnchorParams(hp["alpha"], hp["eta"]))
                    predict = fit(t, extras, subnormalized=True)
                elif method == "distill":
                    predict = fit(distilled_targets(td.y_train, g_train, DistillConfig(hp["lambda"])), extras)
                elif method == "codistill":
                    b_init = base.copy() if extras.get("partner_init", "warm") == "warm" else nn.init_cold(dims, cand_seed)
                    a_init = base.copy() if extras.get("init", "warm") == "warm" else nn.init_cold(dims, cand_seed)
                    model = co_distill_train(
                        a_init, b_init, SoftTargetBatch(td.x_train, onehot_train), td.validation,
                        CoDistillConfig(hp["alpha"], int(extras.get("warmup_steps", 0))), cfg_for(extras), phi,
                    )
                    predict = model.predict
                elif method == "churn_constrained":
                    if sweep is None:
                        grid = LambdaGrid(tuple(extras.get("lambda", DEFAULT_GRID)))
                        sweep = run_lambda_sweep(td.x_train, td.y_train, td.validation, base, grid, cfg_for(extras), phi)
                    clf, _ = solve_from_sweep(sweep, base, ChurnBudget(hp["epsilon"]), phi, extras.get("mode", "single-best"))
                    predict = clf.predict
                else:  # pragma: no cover - guarded by plan validation
                    raise ValueError(method)
                results[key] = _evaluate(predict, base_test, td, phi)
            except Exception as exc:  # recorded per trial; see _assemble
                log.warning("trial %d %s failed: %s", trial, key, exc)
                results[key] = f"{type(exc).__name__}: {exc}"
    return results


def _assemble(plan: ExperimentPlan, trials: list[dict]) -> ExperimentReport:
    base = MethodRecord("base", {})
    for res in trials:
        acc, _, _ = res["base"]
        base.accuracy.append(acc)
        base.hard_churn.append(0.0)
        base.soft_churn.append(0.0)
    records = []
    for method in plan.methods:
        settings, _ = _grid_settings(method, plan.methods[method])
        for hp in settings:
            rec = MethodRecord(method, hp)
            key = rec.key
            for t, res in enumerate(trials):
                value = res[key]
                if isinstance(value, str):
                    rec.failures.append(f"trial {t}: {value}")
                    rec.accuracy.append(math.nan)
                    rec.hard_churn.append(math.nan)
                    rec.soft_churn.append(math.nan)
                else:
                    rec.accuracy.append(value[0])
                    rec.hard_churn.append(value[1])
                    rec.soft_churn.append(value[2])
            if len(rec.failures) == len(trials):
                raise RuntimeError(f"{key} failed in every trial: {rec.failures[0]}")
            records.append(rec)
    report = ExperimentReport(plan.to_dict(), base, records)
    if "cold" in plan.methods:
        report.selection = churn_at_cold_accuracy(report)
    report.frontier, report.method_frontiers = _frontiers(records)
    return report


def _trial_worker(args):
    plan_doc, trial = args
    plan = ExperimentPlan.from_dict(plan_doc)
    ds = load_plan_dataset(plan)
    x, y, test_idx, pool = prepare_features(plan, ds)
    return _run_trial(plan, trial, x, y, test_idx, pool, ds.num_classes)


def run_experiment(plan: ExperimentPlan, workers: int | None = None) -> ExperimentReport:
    """Run every trial of ``plan`` and aggregate; deterministic given the plan.

    Trials run in parallel when ``workers`` (or ``$LOWCHURN_WORKERS``) > 1;
    results are merged in trial order so the report does not depend on it.
    """
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    ds = load_plan_dataset(plan)
    x, y, test_idx, pool = prepare_features(plan, ds)
    if workers > 1 and plan.num_trials > 1:
        doc = plan.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool_exec:
            trials = list(pool_exec.map(_trial_worker, [(doc, t) for t in range(plan.num_trials)]))
    else:
        trials = [_run_trial(plan, t, x, y, test_idx, pool, ds.num_classes) for t in range(plan.num_trials)]
    report = _assemble(plan, trials)
    report.plan["dataset_summary"] = {"rows": len(ds), "features": ds.dim, "classes": ds.num_classes}
    if ds.vocabulary:
        report.plan["categorical_vocabulary"] = ds.vocabulary
    return report


# -- emission ---------------------------------------------------------------


def write_frontier_csv(report: ExperimentReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "hyperparameters", "accuracy", "hard_churn"])
        for p in report.frontier:
            w.writerow([p["method"], json.dumps(p["hyperparameters"], sort_keys=True), repr(p["accuracy"]), repr(p["hard_churn"])])


def write_records_csv(report: ExperimentReport, path) -> None:
    cols = ["mean_accuracy", "se_accuracy", "mean_hard_churn", "se_hard_churn", "mean_soft_churn", "se_soft_churn"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "hyperparameters", *cols, "failures"])
        for r in [report.base, *report.records]:
            s = r.summary()
            w.writerow([r.method, json.dumps(r.hyperparameters, sort_keys=True), *(repr(s[c]) for c in cols), len(r.failures)])


def write_sweep_csv(report: ExperimentReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mean_accuracy", "mean_hard_churn", "mean_soft_churn"])
        for r in report.by_method().get("distill", []):
            s = r.summary()
            w.writerow([repr(r.hyperparameters["lambda"]), repr(s["mean_accuracy"]), repr(s["mean_hard_churn"]), repr(s["mean_soft_churn"])])


def cost_curves(report: ExperimentReport, weights=None) -> list[dict]:
    """Per method, ``min_setting w * error + (1 - w) * churn`` over a grid of trade-off weights."""
    weights = np.linspace(0.0, 1.0, 11) if weights is None else weights
    rows = []
    for method, records in report.by_method().items():
        pts = [(r.summary()["mean_accuracy"], r.summary()["mean_hard_churn"]) for r in records]
        pts = [(a, c) for a, c in pts if math.isfinite(a) and math.isfinite(c)]
        if not pts:
            continue
        for wt in weights:
            cost = min(float(wt) * (1.0 - a) + (1.0 - float(wt)) * c for a, c in pts)
            rows.append({"method": method, "weight": round(float(wt), 10), "cost": cost})
    return rows


def write_cost_csv(report: ExperimentReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "error_weight", "cost"])
        for row in cost_curves(report):
            w.writerow([row["method"], repr(row["weight"]), repr(row["cost"])])


def write_report(report: ExperimentReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    write_frontier_csv(report, out / "frontier.csv")
    write_records_csv(report, out / "records.csv")
    write_sweep_csv(report, out / "sweep.csv")
    write_cost_csv(report, out / "cost_curves.csv")
    vocab = report.plan.get("categorical_vocabulary")
    if vocab:
        (out / "vocabulary.json").write_text(json.dumps(vocab, indent=2, sort_keys=True) + "\n")
    return out / "report.json"
