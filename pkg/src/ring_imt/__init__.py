"""Graph-based recurrent orientation estimation for kinematic chains from 6D IMUs."""

__version__ = "0.1.0"

from .estimator import DeadReckoningEstimator, RingEstimator
from .net import RingParams, init_params, ring_apply, ring_step
from .rcmg import AblationFlags, ImuModel, RcmgRanges, TrainingPair, generate_batch, generate_pair

__all__ = [
    "__version__",
    "AblationFlags",
    "DeadReckoningEstimator",
    "ImuModel",
    "RcmgRanges",
    "RingEstimator",
    "RingParams",
    "TrainingPair",
    "generate_batch",
    "generate_pair",
    "init_params",
    "ring_apply",
    "ring_step",
]
