"""Subtask-based cooperative multi-agent Q-learning on a small numpy autodiff engine."""
from .config import RunConfig
from .envs import HeterogeneousJobs, TwoRolesMatrix, make_env, oracle_return
from .harness import evaluate, sweep_k, train
from .model import ABLATIONS, LDSANetwork, Learner

__all__ = [
    "ABLATIONS",
    "HeterogeneousJobs",
    "LDSANetwork",
    "Learner",
    "RunConfig",
    "TwoRolesMatrix",
    "evaluate",
    "make_env",
    "oracle_return",
    "sweep_k",
    "train",
]
__version__ = "0.1.0"
