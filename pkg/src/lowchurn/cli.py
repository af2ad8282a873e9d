"""Command-line entry point: ``lowchurn {run,oracle-check,frontier,sweep,solve}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import nn
from .algorithm import ChurnBudget, LambdaGrid, load_sweep, run_lambda_sweep, save_sweep, solve_from_sweep
from .experiment import ExperimentPlan, ExperimentReport, prepare_features, trial_split, derive_seed, load_plan_dataset, run_experiment, write_frontier_csv, write_report
from .nn import SoftTargetBatch
from .simplex import empirical_churn, one_hot
from .targets import DEFAULT_GRID
from .verification import timed_suite, write_outcomes


def _cmd_run(args) -> int:
    plan = ExperimentPlan.from_file(args.plan)
    report = run_experiment(plan, workers=args.workers)
    path = write_report(report, args.out)
    print(f"report written to {path}")
    return 0


def _cmd_oracle_check(args) -> int:
    outcomes, elapsed = timed_suite(seed=args.seed, trials=args.trials, feasibility_seeds=args.feasibility_seeds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_outcomes(outcomes, out, elapsed)
    for o in outcomes:
        status = "SKIP" if o.skipped else ("PASS" if o.passed else "FAIL")
        print(f"{status} {o.name} measured={o.measured:.3g} tolerance={o.tolerance:.3g}")
    ok = all(o.passed for o in outcomes)
    print(f"{'all checks passed' if ok else 'checks FAILED'} in {elapsed:.1f}s; outcomes in {out}")
    return 0 if ok else 1


def _cmd_frontier(args) -> int:
    report = ExperimentReport.load(args.report)
    write_frontier_csv(report, args.out)
    print(f"{len(report.frontier)} frontier points written to {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    """Train the base model and lambda sweep for one trial of a plan and save the manifest."""
    plan = ExperimentPlan.from_file(args.plan)
    ds = load_plan_dataset(plan)
    x, y, test_idx, pool = prepare_features(plan, ds)
    m = ds.num_classes
    td = trial_split(plan, x, y, test_idx, pool, args.trial, m)
    phi = plan.phi
    base_seed = derive_seed(plan.seed, args.trial, "base")
    cand_seed = derive_seed(plan.seed, args.trial, "candidate")
    dims = (x.shape[1], plan.hidden_dim, m)
    base_cfg = nn.TrainConfig(**{**plan.train.__dict__, "seed": base_seed})
    cand_cfg = nn.TrainConfig(**{**plan.train.__dict__, "seed": cand_seed})
    base = nn.train(nn.init_cold(dims, base_seed), SoftTargetBatch(td.x_init, one_hot(td.y_init, m)), td.validation, base_cfg, phi)
    lambdas = args.lambdas or plan.methods.get("churn_constrained", {}).get("lambda", DEFAULT_GRID)
    sweep = run_lambda_sweep(td.x_train, td.y_train, td.validation, base, LambdaGrid(tuple(lambdas)), cand_cfg, phi)
    manifest = save_sweep(sweep, base, phi, cand_cfg, args.out)
    print(f"sweep manifest written to {manifest}")
    if args.epsilon is not None:
        clf, report = solve_from_sweep(sweep, base, ChurnBudget(args.epsilon), phi, args.mode)
        report_doc = report.to_dict()
        report_doc["test_churn"] = empirical_churn(phi, base.predict(td.x_test), clf.predict(td.x_test))
        (Path(args.out) / "solution.json").write_text(json.dumps(report_doc, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_solve(args) -> int:
    sweep, base, phi, _ = load_sweep(args.manifest_dir)
    _, report = solve_from_sweep(sweep, base, ChurnBudget(args.epsilon), phi, args.mode)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if report.feasible else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowchurn", description="Churn-constrained training via base-model distillation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment plan and write a report directory")
    p.add_argument("plan", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=None, help="parallel trials (default: $LOWCHURN_WORKERS or 1)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("oracle-check", help="run the verification suite; nonzero exit on failure")
    p.add_argument("--out", type=Path, default=Path("oracle_outcomes.json"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--feasibility-seeds", type=int, default=1)
    p.set_defaults(func=_cmd_oracle_check)

    p = sub.add_parser("frontier", help="export the Pareto frontier of a report as CSV")
    p.add_argument("report", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_frontier)

    p = sub.add_parser("sweep", help="train the lambda sweep for one trial of a plan and save its manifest")
    p.add_argument("plan", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--epsilon", type=float, help="also solve for this churn budget")
    p.add_argument("--mode", choices=("ensemble", "single-best"), default="ensemble")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("solve", help="solve the churn-constrained program on a saved sweep")
    p.add_argument("manifest_dir", type=Path)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--mode", choices=("ensemble", "single-best"), default="ensemble")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_solve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
