"""Model-based exploration by maximizing expected information gain about the world model."""
from .agent import BetaSchedule, ExplorationAgent, ReplayBuffer, Transition
from .ensemble import Ensemble, ModelTrainingConfig
from .envs import EnvConfig, PointMassEnv, TiltedPushingEnv, make_config
from .infogain import EstimatorConfig, InfoKind, estimate_li, estimate_mi
from .planner import PlanMemory, PlannerConfig, cem_plan, cem_plan_with_memory

__version__ = "0.1.0"

__all__ = [
    "BetaSchedule", "Ensemble", "EnvConfig", "EstimatorConfig", "ExplorationAgent", "InfoKind",
    "ModelTrainingConfig", "PlanMemory", "PlannerConfig", "PointMassEnv", "ReplayBuffer", "TiltedPushingEnv",
    "Transition", "cem_plan", "cem_plan_with_memory", "estimate_li", "estimate_mi", "make_config",
]
