"""Reward inference from biased demonstrators with learned differentiable planners."""

from .demonstrators import BiasSpec, all_demonstrators, demonstrator_policy
from .diff_planners import SoftVIConfig, SoftVIPlanner, VINConfig, VINPlanner
from .evaluation import action_prediction_accuracy, percent_reward_obtained
from .grid_mdp import Dataset, Entry, GridConfig, WorldModel, generate_gridworld
from .inference import InferenceResult, TrainConfig, algorithm1, algorithm2

__all__ = [
    "BiasSpec", "all_demonstrators", "demonstrator_policy",
    "SoftVIConfig", "SoftVIPlanner", "VINConfig", "VINPlanner",
    "action_prediction_accuracy", "percent_reward_obtained",
    "Dataset", "Entry", "GridConfig", "WorldModel", "generate_gridworld",
    "InferenceResult", "TrainConfig", "algorithm1", "algorithm2",
]
