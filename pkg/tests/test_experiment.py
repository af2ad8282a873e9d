import csv
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowchurn import experiment
from lowchurn.experiment import (
    ExperimentPlan,
    ExperimentReport,
    MethodRecord,
    churn_at_cold_accuracy,
    cost_curves,
    pareto_frontier,
    run_experiment,
    write_report,
)

DATA = Path(__file__).parent / "data"


def small_plan(**overrides):
    doc = {
        "name": "small",
        "seed": 3,
        "num_trials": 2,
        "dataset": {"source": "synthetic", "kind": "gaussian-blobs", "dims": 2, "num_classes": 2, "n": 900},
        "split": {"initial_size": 150, "batch_size": 250, "validation_size": 60},
        "hidden_dim": 8,
        "train": {"max_epochs": 15},
        "methods": {"cold": {}},
    }
    doc.update(overrides)
    return ExperimentPlan.from_dict(doc)


def fake_report(rows, cold=(0.8, 0.2)):
    records = [MethodRecord("cold", {}, [cold[0]], [cold[1]], [cold[1]])]
    for method, hp, acc, churn in rows:
        records.append(MethodRecord(method, hp, [acc], [churn], [churn]))
    return ExperimentReport({}, MethodRecord("base", {}, [0.7], [0.0], [0.0]), records)


class TestPlan:
    def test_rows_checked(self):
        plan = small_plan(split={"initial_size": 800, "batch_size": 800, "validation_size": 100})
        with pytest.raises(ValueError, match="training rows"):
            run_experiment(plan)

    def test_invalid(self):
        with pytest.raises(ValueError):
            small_plan(num_trials=0)
        with pytest.raises(ValueError):
            small_plan(methods={"dropout": {}})
        with pytest.raises(ValueError):
            small_plan(scoring="hinge")

    def test_yaml_relative_path(self, tmp_path):
        plan_file = tmp_path / "plan.yaml"
        (tmp_path / "tiny.csv").write_text((DATA / "tiny.csv").read_text())
        plan_file.write_text(
            "name: t\nseed: 1\ndataset:\n  source: csv\n  path: tiny.csv\n  label_column: label\n"
            "model:\n  hidden_dim: 12\nmethods:\n  distill:\n    lambda: [0.0, 0.5]\n"
        )
        plan = ExperimentPlan.from_file(plan_file)
        assert plan.dataset["path"] == str((tmp_path / "tiny.csv").resolve())
        assert plan.hidden_dim == 12 and plan.methods == {"distill": {"lambda": [0.0, 0.5]}}


class TestRun:
    def test_cold_only(self):
        report = run_experiment(small_plan(num_trials=1))
        assert [r.key for r in report.records] == ["cold"]
        assert len(report.records[0].accuracy) == 1
        assert report.selection["cold"]["mean_hard_churn"] == report.records[0].hard_churn[0]

    def test_warm_zero_epochs(self):
        report = run_experiment(small_plan(methods={"warm": {"max_epochs": 0}}))
        rec = report.record("warm")
        assert rec.hard_churn == [0.0, 0.0] and rec.soft_churn == [0.0, 0.0]
        assert rec.accuracy == report.base.accuracy

    def test_all_methods_run(self):
        methods = {
            "cold": {}, "warm": {}, "shrink_perturb": {"alpha": [0.5]}, "mixup": {"alpha": [0.4]},
            "label_smoothing": {"alpha": [0.2]}, "codistill": {"alpha": [0.5]},
            "anchor": {"alpha": [0.5], "eta": [0.7]}, "distill": {"lambda": [0.0, 0.5]},
            "churn_constrained": {"epsilon": [0.02], "lambda": [0.3, 0.8], "mode": "ensemble"},
        }
        report = run_experiment(small_plan(methods=methods))
        assert len(report.records) == 10
        assert all(not r.failures for r in report.records)
        for r in report.records:
            s = r.summary()
            assert 0 <= s["mean_accuracy"] <= 1 and 0 <= s["mean_hard_churn"] <= 1
            assert s["se_accuracy"] == pytest.approx(np.std(r.accuracy, ddof=1) / math.sqrt(2))

    def test_failures_recorded(self, monkeypatch):
        calls = {"n": 0}
        real = experiment.smoothed_targets

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 1:
                raise FloatingPointError("boom")
            return real(*args, **kwargs)

        monkeypatch.setattr(experiment, "smoothed_targets", flaky)
        report = run_experiment(small_plan(methods={"cold": {}, "label_smoothing": {"alpha": [0.3]}}))
        rec = report.record("label_smoothing", alpha=0.3)
        assert len(rec.failures) == 1 and "boom" in rec.failures[0]
        assert math.isnan(rec.accuracy[0]) and not math.isnan(rec.accuracy[1])

    def test_all_trials_failing_is_fatal(self, monkeypatch):
        def broken(*args, **kwargs):
            raise FloatingPointError("always")

        monkeypatch.setattr(experiment, "smoothed_targets", broken)
        with pytest.raises(RuntimeError, match="every trial"):
            run_experiment(small_plan(methods={"label_smoothing": {"alpha": [0.3]}}))

    def test_deterministic_bytes(self, tmp_path):
        plan = small_plan(methods={"cold": {}, "distill": {"lambda": [0.3]}})
        a = write_report(run_experiment(plan), tmp_path / "a")
        b = write_report(run_experiment(plan), tmp_path / "b")
        for name in ("report.json", "frontier.csv", "records.csv", "sweep.csv", "cost_curves.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert a.read_text() == b.read_text()

    def test_parallel_matches_serial(self):
        plan = small_plan(methods={"cold": {}, "distill": {"lambda": [0.5]}})
        assert run_experiment(plan, workers=2).to_json() == run_experiment(plan, workers=1).to_json()

    def test_report_roundtrip(self, tmp_path):
        report = run_experiment(small_plan(methods={"cold": {}, "warm": {}}))
        path = write_report(report, tmp_path)
        back = ExperimentReport.load(path)
        assert back.to_json() == report.to_json()

    def test_csv_vocabulary_emitted(self, tmp_path):
        plan = ExperimentPlan.from_dict({
            "dataset": {"source": "csv", "path": str(DATA / "tiny.csv"), "label_column": "label"},
            "split": {"initial_size": 1, "batch_size": 1, "validation_size": 1, "test_fraction": 0.25},
            "train": {"max_epochs": 2},
        })
        write_report(run_experiment(plan), tmp_path)
        assert "color" in (tmp_path / "vocabulary.json").read_text()


def test_distill_lambda_zero_reduces_churn():
    wins = 0
    for seed in range(10):
        plan = small_plan(seed=seed, num_trials=1, methods={"cold": {}, "distill": {"lambda": [0.0]}})
        report = run_experiment(plan)
        wins += report.record("distill", **{"lambda": 0.0}).hard_churn[0] <= report.record("cold").hard_churn[0]
    assert wins > 5


class TestSelection:
    def test_below_cold_not_selected(self):
        sel = churn_at_cold_accuracy(fake_report([("anchor", {"alpha": 0.5}, 0.79, 0.01)]))
        assert sel["anchor"] is None

    def test_lowest_churn_wins(self):
        sel = churn_at_cold_accuracy(fake_report([("distill", {"lambda": 0.2}, 0.85, 0.05), ("distill", {"lambda": 0.4}, 0.81, 0.03)]))
        assert sel["distill"]["hyperparameters"] == {"lambda": 0.4}
        assert sel["distill"]["mean_hard_churn"] == 0.03

    def test_exact_tie_qualifies(self):
        sel = churn_at_cold_accuracy(fake_report([("distill", {"lambda": 0.2}, 0.8, 0.1), ("distill", {"lambda": 0.4}, 0.79, 0.01)]))
        assert sel["distill"]["hyperparameters"] == {"lambda": 0.2}

    def test_churn_ties_reported(self):
        sel = churn_at_cold_accuracy(fake_report([("distill", {"lambda": 0.2}, 0.9, 0.1), ("distill", {"lambda": 0.4}, 0.85, 0.1)]))
        assert sel["distill"]["ties"] == [{"lambda": 0.4}]

    def test_requires_cold(self):
        report = fake_report([])
        report.records = []
        with pytest.raises(ValueError):
            churn_at_cold_accuracy(report)

    def test_cost_curves(self):
        rows = cost_curves(fake_report([("distill", {"lambda": 0.2}, 0.9, 0.1)]), weights=[0.0, 1.0])
        by = {(r["method"], r["weight"]): r["cost"] for r in rows}
        assert by[("distill", 0.0)] == pytest.approx(0.1) and by[("distill", 1.0)] == pytest.approx(0.1)
        assert by[("cold", 1.0)] == pytest.approx(0.2)


class TestPareto:
    def test_examples(self):
        assert pareto_frontier([(0.9, 0.1)]) == [(0.9, 0.1)]
        assert pareto_frontier([(0.9, 0.1), (0.8, 0.2)]) == [(0.9, 0.1)]
        assert pareto_frontier([(0.9, 0.2), (0.8, 0.1)]) == [(0.8, 0.1), (0.9, 0.2)]

    def test_empty(self):
        with pytest.raises(ValueError):
            pareto_frontier([])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 10)), min_size=1, max_size=30))
    def test_matches_pairwise_oracle(self, raw):
        points = [(a / 10, c / 10) for a, c in raw]

        def dominated(p):
            return any(q[0] >= p[0] and q[1] <= p[1] and q != p for q in points)

        expected = sorted({p for p in points if not dominated(p)})
        got = pareto_frontier(points)
        assert got == expected
        assert all(not (q[0] >= p[0] and q[1] <= p[1] and q != p) for p in got for q in got)

    def test_report_frontier_non_dominated(self, tmp_path):
        report = run_experiment(small_plan(methods={"cold": {}, "warm": {}, "distill": {"lambda": [0.2, 0.6]}}))
        pts = [(p["accuracy"], p["hard_churn"]) for p in report.frontier]
        assert pts and pareto_frontier(pts) == sorted(set(pts))
        write_report(report, tmp_path)
        with (tmp_path / "frontier.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "hyperparameters", "accuracy", "hard_churn"]
        assert len(rows) == len(report.frontier) + 1
