"""Action-space adversarial training for a simplified lunar-lander agent."""

from .adv_training import (TrainingAborted, TrainingRunConfig, TrainingRunRecord,
                           moving_average, multi_seed_aggregate, run_training)
from .errors import (AggregationError, CheckpointError, ConfigurationError, InputError,
                     NonFiniteError, RobustActError, StateError)
from .eval_harness import EvalReport, Scenario, compare, evaluate, histogram
from .lander_env import LanderConfig, LanderEnv, LanderState, Termination
from .mas_attack import AttackConfig, Norm, pgd_attack, project
from .policy import Architecture, GaussianActionDist, PolicyNet, load_checkpoint, save_checkpoint
from .ppo import PPOConfig, RolloutBuffer, Transition, compute_gae, compute_returns, ppo_update

__version__ = "0.1.0"

__all__ = [
    "AggregationError", "Architecture", "AttackConfig", "CheckpointError", "ConfigurationError",
    "EvalReport", "GaussianActionDist", "InputError", "LanderConfig", "LanderEnv", "LanderState",
    "NonFiniteError", "Norm", "PPOConfig", "PolicyNet", "RobustActError", "RolloutBuffer",
    "Scenario", "StateError", "Termination", "TrainingAborted", "TrainingRunConfig",
    "TrainingRunRecord", "Transition", "compare", "compute_gae", "compute_returns", "evaluate",
    "histogram", "load_checkpoint", "moving_average", "multi_seed_aggregate", "pgd_attack",
    "ppo_update", "project", "run_training", "save_checkpoint",
]
