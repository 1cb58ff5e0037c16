"""scikit-learn style wrappers around the estimator and the baselines.

Sequences are passed as arrays: inputs ``X`` of shape ``(B, T, N, 10)``
(or a single ``(T, N, 10)`` sequence) and targets ``y`` of shape
``(B, T, N, 4)``. The sampling rate is read from input channel 9.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import dead_reckoning, mae_deg
from .formats import read_weights, write_weights
from .kinematics import validate_parent_array
from .net import INPUT_WIDTH, RingParams, ring_apply
from .rcmg import TrainingPair
from .training import TrainConfig, train

__all__ = ["check_sequences", "sampling_rates", "RingEstimator", "DeadReckoningEstimator"]


def check_sequences(X, y=None, n_bodies: int | None = None):
    """Validate sequence arrays and promote a single sequence to a batch of one.

    Returns ``(X, y, single)`` with float64 arrays.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 3
    if single:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != INPUT_WIDTH:
        raise ValueError(f"X must have shape (B, T, N, {INPUT_WIDTH}); got {X.shape}")
    if X.shape[1] == 0:
        raise ValueError("sequences must have at least one timestep")
    if n_bodies is not None and X.shape[2] != n_bodies:
        raise ValueError(f"X has {X.shape[2]} bodies, expected {n_bodies}")
    if not np.isfinite(X).all():
        raise ValueError("X contains NaN or infinity")
    if np.any(X[..., 9] <= 0):
        raise ValueError("inverse sampling rate channel must be positive")
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if single and y.ndim == 3:
            y = y[None]
        if y.shape != X.shape[:3] + (4,):
            raise ValueError(f"y must have shape {X.shape[:3] + (4,)}; got {y.shape}")
        norms = np.linalg.norm(y, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("y must hold unit quaternions")
    return X, y, single


def sampling_rates(X) -> np.ndarray:
    """Per-sequence sampling rate in Hz from the inverse-rate channel."""
    return 1.0 / np.asarray(X)[:, 0, 0, 9]


class RingEstimator(BaseEstimator):
    """Recurrent graph orientation estimator.

    Parameters
    ----------
    hidden_size, message_size : int
        GRU state width ``H`` and message width ``M``.
    parents : tuple of int
        Parent array of the chain; 0 is the earth frame.
    steps, batch_size, learning_rate : training schedule.
    warmup_s : float
        Leading seconds of each sequence left out of the training loss.
    truncate : int or None
        Truncated backpropagation chunk length.
    random_state : int
    """

    def __init__(
        self,
        hidden_size: int = 32,
        message_size: int = 16,
        parents: Sequence[int] = (0, 1, 2),
        steps: int = 1000,
        batch_size: int = 16,
        learning_rate: float = 3e-4,
        warmup_s: float = 1.0,
        truncate: int | None = None,
        random_state: int = 0,
    ):
        self.hidden_size = hidden_size
        self.message_size = message_size
        self.parents = parents
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_s = warmup_s
        self.truncate = truncate
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            H=self.hidden_size,
            M=self.message_size,
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.learning_rate,
            parents=tuple(self.parents),
            warmup_s=self.warmup_s,
            truncate=self.truncate,
            val_count=0,
            val_every=0,
            seed=self.random_state,
        )

    def fit(self, X, y):
        lam = validate_parent_array(self.parents)
        X, y, _ = check_sequences(X, y, n_bodies=len(lam))
        rates = sampling_rates(X)
        pairs = [TrainingPair(X[b], y[b], float(rates[b]), lam) for b in range(len(X))]
        cfg = self._config()
        cfg.batch_size = min(cfg.batch_size, len(pairs))
        self.params_, self.training_log_ = train(cfg, data=pairs, val_data=[])
        return self

    @classmethod
    def from_params(cls, params: RingParams, parents: Sequence[int] = (0, 1, 2)) -> "RingEstimator":
        est = cls(hidden_size=params.H, message_size=params.M, parents=tuple(parents))
        est.params_ = params
        est.training_log_ = []
        return est

    @classmethod
    def load(cls, path, parents: Sequence[int] = (0, 1, 2)) -> "RingEstimator":
        return cls.from_params(read_weights(path), parents)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        write_weights(path, self.params_)

    def predict(self, X, parents: Sequence[int] | None = None):
        """Unit-quaternion estimates, one per body and timestep.

        ``parents`` overrides the chain layout so a fitted model can serve
        other graphs with the same weights.
        """
        check_is_fitted(self, "params_")
        lam = validate_parent_array(self.parents if parents is None else parents)
        X, _, single = check_sequences(X, n_bodies=len(lam))
        out = ring_apply(X, lam, self.params_)
        return out[0] if single else out

    def score(self, X, y, exclude_s: float = 5.0) -> float:
        """Negative mean tracking error in degrees (higher is better)."""
        return -_mean_mae(self.predict(X), X, y, self.parents, exclude_s)


class DeadReckoningEstimator(BaseEstimator):
    """Gyroscope strapdown integration from the identity; nothing to learn."""

    def __init__(self, parents: Sequence[int] = (0, 1, 2)):
        self.parents = parents

    def fit(self, X, y=None):
        check_sequences(X, y, n_bodies=len(self.parents))
        return self

    def predict(self, X):
        lam = validate_parent_array(self.parents)
        X, _, single = check_sequences(X, n_bodies=len(lam))
        rates = sampling_rates(X)
        out = np.stack(
            [dead_reckoning(TrainingPair(X[b], np.zeros(X.shape[1:3] + (4,)), float(rates[b]), lam)) for b in range(len(X))]
        )
        return out[0] if single else out

    def score(self, X, y, exclude_s: float = 5.0) -> float:
        return -_mean_mae(self.predict(X), X, y, self.parents, exclude_s)


def _mean_mae(Yhat, X, y, parents, exclude_s):
    X, y, single = check_sequences(X, y)
    Yhat = Yhat[None] if single else Yhat
    rates = sampling_rates(X)
    return float(np.mean([mae_deg(Yhat[b], y[b], parents, rates[b], exclude_s) for b in range(len(X))]))
