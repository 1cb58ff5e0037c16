"""Evaluation: tracking error metric, resampling, baselines, ablation and rate sweeps."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import signal

from .kinematics import validate_parent_array
from .quat import IDENTITY, _mul_raw, normalize, quat_angle, quat_conj, quat_from_rotvec, inclination_angle, slerp
from .rcmg import DEFAULT_RATES, AblationFlags, ImuModel, RcmgRanges, TrainingPair, generate_pair

__all__ = [
    "EmptyWindowError",
    "tracking_errors_deg",
    "mae_deg",
    "resample",
    "dead_reckoning",
    "identity_prediction",
    "evaluate",
    "AblationRow",
    "ablation_grid",
    "rate_sweep",
    "write_table",
]


class EmptyWindowError(ValueError):
    """The exclusion window covers the whole sequence."""


def tracking_errors_deg(Yhat, Y, parents: Sequence[int]) -> np.ndarray:
    """Per-sample absolute angles ``(..., T, N)`` in degrees; roots use inclination only."""
    lam = validate_parent_array(parents)
    Yhat = np.asarray(Yhat, float)
    Y = np.asarray(Y, float)
    if Yhat.shape != Y.shape or Y.shape[-2:] != (len(lam), 4):
        raise ValueError(f"shape mismatch: {Yhat.shape} vs {Y.shape}")
    err = np.empty(Y.shape[:-1])
    for i, p in enumerate(lam):
        if p == 0:
            err[..., i] = inclination_angle(Yhat[..., i, :], Y[..., i, :])
        else:
            err[..., i] = quat_angle(Yhat[..., i, :], Y[..., i, :])
    return np.degrees(err)


def _first_kept(F: float, exclude_s: float) -> int:
    return int(math.ceil(exclude_s * F - 1e-9))


def mae_deg(Yhat, Y, parents: Sequence[int], F: float, exclude_s: float = 5.0, per_body: bool = False):
    """Mean absolute tracking error in degrees after the first ``exclude_s`` seconds.

    Inputs are ``(T, N, 4)`` or a stack of trials ``(K, T, N, 4)``; the mean
    runs over trials, kept timesteps and bodies with equal weight. With
    ``per_body`` the per-body means are returned as well.
    """
    err = tracking_errors_deg(Yhat, Y, parents)
    T = err.shape[-2]
    start = _first_kept(F, exclude_s)
    if start >= T:
        raise EmptyWindowError(f"excluding {exclude_s} s at {F} Hz leaves nothing of {T} samples")
    kept = err[..., start:, :]
    total = float(kept.mean())
    if per_body:
        return total, kept.reshape(-1, kept.shape[-1]).mean(axis=0)
    return total


def resample(pair: TrainingPair, F_new: float) -> TrainingPair:
    """Resample a pair to ``F_new`` Hz over the same time span.

    IMU channels are low-pass filtered (zero phase, cutoff ``0.4 F_new``)
    when downsampling and then linearly interpolated; targets are
    interpolated along the shortest arc. The rate channel becomes
    ``1 / F_new``.
    """
    if F_new <= 0:
        raise ValueError("F_new must be positive")
    F = pair.F
    T = pair.T
    if F_new == F:
        return TrainingPair(pair.X.copy(), pair.Y.copy(), float(F), pair.parents)
    t_old = np.arange(T) / F
    T_new = int(math.floor((T - 1) * F_new / F + 1e-9)) + 1
    t_new = np.arange(T_new) / F_new

    imu = pair.X[..., :6].reshape(T, -1)
    if F_new < F and T > 27:
        sos = signal.butter(4, 0.4 * F_new, fs=F, output="sos")
        imu = signal.sosfiltfilt(sos, imu, axis=0)
    imu_new = np.stack([np.interp(t_new, t_old, imu[:, c]) for c in range(imu.shape[1])], axis=-1)

    X = np.zeros((T_new, pair.N, 10))
    X[..., :6] = imu_new.reshape(T_new, pair.N, 6)
    X[..., 6:9] = pair.X[0, :, 6:9]
    X[..., 9] = 1.0 / F_new

    k = np.clip(np.searchsorted(t_old, t_new, side="right") - 1, 0, T - 2)
    s = np.clip((t_new - t_old[k]) / (t_old[k + 1] - t_old[k]), 0.0, 1.0)
    Y = slerp(pair.Y[k], pair.Y[k + 1], np.broadcast_to(s[:, None], (T_new, pair.N)))
    return TrainingPair(X, Y, float(F_new), pair.parents)


def dead_reckoning(pair: TrainingPair, initial=None) -> np.ndarray:
    """Strapdown gyro integration per IMU, composed into relative orientations.

    Each IMU starts from ``initial`` (default identity) and integrates the
    trapezoidal mean of consecutive gyro samples. A body without an IMU
    inherits its parent's estimate, so its relative orientation is the
    identity.
    """
    lam = pair.parents
    X = pair.X
    T, N = X.shape[:2]
    dt = 1.0 / pair.F
    has_imu = np.any(X[..., :6] != 0.0, axis=(0, 2))
    rows = np.flatnonzero(has_imu)
    q0 = np.broadcast_to(IDENTITY if initial is None else normalize(initial), (N, 4))
    world = np.empty((T, N, 4))
    if len(rows):
        gyro = X[:, rows, 0:3]
        q = q0[rows].copy()
        world[0, rows] = q
        steps = quat_from_rotvec(0.5 * (gyro[1:] + gyro[:-1]) * dt)
        for t in range(1, T):
            q = _mul_raw(q, steps[t - 1])
            q /= np.linalg.norm(q, axis=-1, keepdims=True)
            world[t, rows] = q
    for i, p in enumerate(lam):
        if not has_imu[i]:
            world[:, i] = world[:, p - 1] if p else q0[i]
    out = np.empty_like(world)
    for i, p in enumerate(lam):
        if p and not has_imu[i]:
            out[:, i] = IDENTITY
        else:
            out[:, i] = world[:, i] if p == 0 else normalize(_mul_raw(quat_conj(world[:, p - 1]), world[:, i]))
    return out


def identity_prediction(pair: TrainingPair) -> np.ndarray:
    return np.broadcast_to(IDENTITY, pair.Y.shape).copy()


def evaluate(predict: Callable[[TrainingPair], np.ndarray], pairs: Iterable[TrainingPair], exclude_s: float = 5.0):
    """``(mean, std)`` of the per-trial MAE of ``predict`` over ``pairs``."""
    maes = [mae_deg(predict(p), p.Y, p.parents, p.F, exclude_s) for p in pairs]
    return float(np.mean(maes)), float(np.std(maes))


@dataclass
class AblationRow:
    nonrigid: bool
    misaligned: bool
    sparse: bool
    mae: float
    std: float

    def as_row(self):
        mark = lambda b: "yes" if b else "no"  # noqa: E731
        return [mark(self.nonrigid), mark(self.misaligned), mark(self.sparse), f"{self.mae:.3f}", f"{self.std:.3f}"]


def ablation_grid(
    predict: Callable[[TrainingPair], np.ndarray],
    seeds: Sequence[int],
    F: float = 100.0,
    timesteps: int = 6000,
    exclude_s: float = 5.0,
    parents: Sequence[int] = (0, 1, 2),
    model: ImuModel = ImuModel(),
    ranges: RcmgRanges = RcmgRanges(),
) -> list[AblationRow]:
    """MAE mean and std over ``seeds`` for all eight challenge combinations.

    Rows are ordered nonrigid, then misaligned, then sparse, each off
    before on. Seed ``s`` yields the same motion in every row.
    """
    rows = []
    for nonrigid, misaligned, sparse in itertools.product((False, True), repeat=3):
        flags = AblationFlags(nonrigid, misaligned, sparse)
        pairs = [generate_pair(s, F, timesteps / F, flags, parents, model, ranges) for s in seeds]
        mean, std = evaluate(predict, pairs, exclude_s)
        rows.append(AblationRow(nonrigid, misaligned, sparse, mean, std))
    return rows


def rate_sweep(
    predict: Callable[[TrainingPair], np.ndarray],
    pairs: Sequence[TrainingPair],
    rates: Sequence[float] = DEFAULT_RATES,
    exclude_s: float = 5.0,
) -> list[tuple[float, float, float]]:
    """``(F, mean, std)`` per rate after resampling the same pairs to each rate."""
    out = []
    for F in rates:
        mean, std = evaluate(predict, [resample(p, F) for p in pairs], exclude_s)
        out.append((float(F), mean, std))
    return out


def write_table(rows: Iterable[Sequence], header: Sequence[str], stream, delimiter: str = "\t") -> None:
    w = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
