"""Dual-memory experience replay for continual learning on MNIST-family
benchmarks: learners, streaming protocols, analysis metrics, and an
experiment harness."""

__version__ = "0.1.0"

from .buffer import ReplayBuffer
from .ema import MemoryPairConfig, SemanticMemory, init_pair
from .nn import (
    Architecture,
    Batch,
    LossReport,
    Network,
    ParamVector,
    backward,
    cross_entropy_loss,
    init_params,
    mse_loss,
    sgd_step,
    softmax,
)

__all__ = [
    "Architecture",
    "Batch",
    "LossReport",
    "MemoryPairConfig",
    "Network",
    "ParamVector",
    "ReplayBuffer",
    "SemanticMemory",
    "backward",
    "cross_entropy_loss",
    "init_pair",
    "init_params",
    "mse_loss",
    "sgd_step",
    "softmax",
]
