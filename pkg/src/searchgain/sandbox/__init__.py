"""Desk-scale RL sandbox: synthetic retrieval tasks and a tabular PPO loop."""

from .env import (
    ActionCatalog,
    InfeasibleTaskError,
    SyntheticIndex,
    SyntheticTask,
    action_catalog,
    baseline_keys,
    make_synthetic_task,
    make_training_tasks,
    optimal_accuracy,
    optimal_gbr,
    oracle_accuracy,
    rollout_episode,
    run_text_episode,
    synthetic_baseline_accuracy,
)
from .policy import PolicySnapshot, SoftmaxPolicy
from .train import (
    BatchStep,
    DivergenceError,
    PpoConfig,
    RolloutBatch,
    TrainingResult,
    UpdateRecord,
    compute_advantages,
    objective_and_gradient,
    ppo_surrogate,
    train,
)

__all__ = [
    "ActionCatalog",
    "BatchStep",
    "DivergenceError",
    "InfeasibleTaskError",
    "PolicySnapshot",
    "PpoConfig",
    "RolloutBatch",
    "SoftmaxPolicy",
    "SyntheticIndex",
    "SyntheticTask",
    "TrainingResult",
    "UpdateRecord",
    "action_catalog",
    "baseline_keys",
    "compute_advantages",
    "make_synthetic_task",
    "make_training_tasks",
    "objective_and_gradient",
    "optimal_accuracy",
    "optimal_gbr",
    "oracle_accuracy",
    "ppo_surrogate",
    "rollout_episode",
    "run_text_episode",
    "synthetic_baseline_accuracy",
    "train",
]
