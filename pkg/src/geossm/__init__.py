"""Geometric state-space models: LTI filters with residual-driven selection."""
from __future__ import annotations

from .geometric import GeometricConfig, GeometricSSM
from .lti import StateSpaceSystem, TransferFunction, fft_apply, realize_canonical, simulate_ss
from .mamba import MambaConfig, SelectiveSSM
from .tasks import TaskSpec
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "GeometricConfig", "GeometricSSM", "MambaConfig", "SelectiveSSM", "StateSpaceSystem",
    "TaskSpec", "TrainConfig", "TransferFunction", "evaluate", "fft_apply", "realize_canonical",
    "simulate_ss", "train",
]
