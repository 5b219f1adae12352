"""Budgeted multi-agent communication: training, analysis, and tooling."""

from .agents import ModelConfig, VocabMask, init_params
from .envs import EnvConfig, EpisodeLog, episode_success, make_env
from .numerics import ConfigurationError, NonFiniteError, ParamSet, Tensor
from .training import TrainConfig, budget_penalty, compute_returns, evaluate

__all__ = [
    "ConfigurationError", "NonFiniteError", "ParamSet", "Tensor",
    "EnvConfig", "EpisodeLog", "episode_success", "make_env",
    "ModelConfig", "VocabMask", "init_params",
    "TrainConfig", "budget_penalty", "compute_returns", "evaluate",
]
