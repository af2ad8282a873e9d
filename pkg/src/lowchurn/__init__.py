"""Churn-constrained classifier training by distillation against a base model."""

from .algorithm import (
    ChurnBudget,
    ChurnReducedClassifier,
    EnsembleWeights,
    LambdaGrid,
    LambdaSweep,
    run_algorithm_one,
    run_lambda_sweep,
    solve_ensemble_program,
    solve_from_sweep,
)
from .experiment import ExperimentPlan, ExperimentReport, MethodRecord, churn_at_cold_accuracy, pareto_frontier, run_experiment
from .nn import MlpModel, SoftTargetBatch, TrainConfig, forward, train
from .oracle import AnchorParams, SyntheticDistribution, anchor_minimizer, brute_force_pointwise_minimizer
from .simplex import (
    ProbabilityVector,
    ScoringFunction,
    ScoringKind,
    divergence_phi,
    empirical_churn,
    empirical_risk,
    hard_churn,
    loss_phi,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorParams",
    "ChurnBudget",
    "ChurnReducedClassifier",
    "EnsembleWeights",
    "ExperimentPlan",
    "ExperimentReport",
    "LambdaGrid",
    "LambdaSweep",
    "MethodRecord",
    "MlpModel",
    "ProbabilityVector",
    "ScoringFunction",
    "ScoringKind",
    "SoftTargetBatch",
    "SyntheticDistribution",
    "TrainConfig",
    "anchor_minimizer",
    "brute_force_pointwise_minimizer",
    "churn_at_cold_accuracy",
    "divergence_phi",
    "empirical_churn",
    "empirical_risk",
    "forward",
    "hard_churn",
    "loss_phi",
    "pareto_frontier",
    "run_algorithm_one",
    "run_experiment",
    "run_lambda_sweep",
    "solve_ensemble_program",
    "solve_from_sweep",
    "train",
]
