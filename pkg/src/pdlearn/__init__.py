"""Model-based and model-free primal-dual learning of constrained policies."""

from .analytic import WaterFillingSolution, expected_power, expected_rate, solve_xi
from .nn import Dense, Direction, Mlp, adam_step
from .problem import ConstrainedProblem, DiscreteToyEnv, PowerControlEnv, noise_budget
from .trainer import (
    CategoricalPolicy,
    Mode,
    NoiseSchedule,
    TrainerSettings,
    evaluate_policy,
    init_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "CategoricalPolicy",
    "ConstrainedProblem",
    "Dense",
    "Direction",
    "DiscreteToyEnv",
    "Mlp",
    "Mode",
    "NoiseSchedule",
    "PowerControlEnv",
    "TrainerSettings",
    "WaterFillingSolution",
    "adam_step",
    "evaluate_policy",
    "expected_power",
    "expected_rate",
    "init_state",
    "load_checkpoint",
    "noise_budget",
    "run_training",
    "save_checkpoint",
    "solve_xi",
]
