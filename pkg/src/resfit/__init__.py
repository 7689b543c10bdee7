"""Residual off-policy RL fine-tuning of action-chunked behaviour cloning policies."""

from .bc import ChunkedBCPolicy, collect_demos, filtered_bc, train_bc
from .core import ResidualFineTuner, TrainConfig, train_resfit
from .envs import make_env_spec
from .runtime import episode_lifecycle, evaluate_ab, run_split

__all__ = [
    "ChunkedBCPolicy",
    "ResidualFineTuner",
    "TrainConfig",
    "collect_demos",
    "episode_lifecycle",
    "evaluate_ab",
    "filtered_bc",
    "make_env_spec",
    "run_split",
    "train_bc",
    "train_resfit",
]
