"""Loss, exact gradients through the unroll, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .evaluation import mae_deg
from .kinematics import validate_parent_array
from .net import RingParams, Unroll, init_params
from .quat import ANGLE_EPS, _mul_raw, heading_decompose, quat_conj
from .rcmg import DEFAULT_RATES, AblationFlags, ImuModel, RcmgRanges, TrainingPair, generate_batch

__all__ = [
    "NonFiniteGradientError",
    "TrainingDivergedError",
    "orientation_loss",
    "orientation_loss_and_grad",
    "stack_pairs",
    "loss_gradient",
    "Adam",
    "TrainConfig",
    "train",
]

log = logging.getLogger(__name__)

UP = np.array([0.0, 0.0, 1.0])


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def _warmup_mask(T: int, warmup) -> np.ndarray:
    """``(B, T)`` or ``(T,)`` boolean mask of kept timesteps."""
    w = np.asarray(warmup)
    if np.any(w >= T) or np.any(w < 0):
        raise ValueError(f"warmup {warmup} must lie in [0, {T})")
    return np.arange(T) >= w[..., None] if w.ndim else np.arange(T) >= int(w)


def _angle_sq_and_grad(a, b):
    """``theta^2`` between unit quaternions and its gradient w.r.t. ``a``."""
    dot = (a * b).sum(axis=-1)
    d = np.clip(np.abs(dot), 0.0, 1.0)
    theta = 2.0 * np.arccos(d)
    small = theta < ANGLE_EPS
    theta = np.where(small, 0.0, theta)
    s = np.sqrt(np.maximum(1.0 - d * d, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        dL_dd = np.where(small | (s == 0.0), 0.0, -4.0 * theta / s)  # tangent part vanishes at 0
    sign = np.where(dot < 0.0, -1.0, 1.0)
    return theta**2, (dL_dd * sign)[..., None] * b


def _inclination_with_vjp(q, up=UP):
    """Inclination part of ``q`` and a function pulling cotangents back to ``q``."""
    heading, incl = heading_decompose(q, up)
    n = np.concatenate([q[..., :1], (q[..., 1:] @ up)[..., None] * up], axis=-1)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    norm = np.where(norm < 1e-12, np.inf, norm)  # degenerate: heading fixed at identity

    def vjp(g):
        direct = _mul_raw(heading, g)
        dh = quat_conj(_mul_raw(g, quat_conj(q)))
        dn = (dh - heading * (heading * dh).sum(axis=-1, keepdims=True)) / norm
        dq = np.concatenate([dn[..., :1], (dn[..., 1:] @ up)[..., None] * up], axis=-1)
        return direct + dq

    return incl, vjp


def orientation_loss_and_grad(Yhat, Y, parents: Sequence[int], warmup=0, scale: float = 1.0):
    """Mean squared angle (rad^2) and its gradient w.r.t. ``Yhat``.

    Bodies attached to the earth frame are scored on inclination only. The
    mean runs over the batch, kept timesteps and bodies. ``warmup`` is a
    step count or one count per sequence. The gradient is projected onto
    the tangent space of the unit sphere at ``Yhat``.
    """
    lam = validate_parent_array(parents)
    Yhat = np.asarray(Yhat, float)
    Y = np.asarray(Y, float)
    if Yhat.shape != Y.shape or Yhat.shape[-2:] != (len(lam), 4):
        raise ValueError(f"shape mismatch: {Yhat.shape} vs {Y.shape} for {len(lam)} bodies")
    T = Y.shape[-3]
    mask = _warmup_mask(T, warmup)
    mask = np.broadcast_to(mask, Y.shape[:-2]).astype(float)
    count = mask.sum() * len(lam)

    sq = np.empty(Y.shape[:-1])
    grad = np.empty_like(Yhat)
    roots = [i for i, p in enumerate(lam) if p == 0]
    rel = [i for i, p in enumerate(lam) if p != 0]
    if rel:
        sq[..., rel], grad[..., rel, :] = _angle_sq_and_grad(Yhat[..., rel, :], Y[..., rel, :])
    if roots:
        inc_hat, vjp = _inclination_with_vjp(Yhat[..., roots, :])
        inc = heading_decompose(Y[..., roots, :], UP)[1]
        sq[..., roots], g = _angle_sq_and_grad(inc_hat, inc)
        grad[..., roots, :] = vjp(g)

    w = (scale * mask / count)[..., None]
    loss = float((sq * w).sum())
    grad = grad * w[..., None]
    grad -= Yhat * (Yhat * grad).sum(axis=-1, keepdims=True)
    return loss, grad


def orientation_loss(Yhat, Y, parents: Sequence[int], warmup=0) -> float:
    return orientation_loss_and_grad(Yhat, Y, parents, warmup)[0]


def stack_pairs(pairs: Sequence[TrainingPair]):
    """Stack pairs sharing ``T`` and parents into ``(X, Y, F)`` arrays."""
    if not pairs:
        raise ValueError("no pairs")
    lam = pairs[0].parents
    T = pairs[0].T
    for p in pairs:
        if p.parents != lam or p.T != T:
            raise ValueError("pairs in a batch must share T and the parent array")
    X = np.stack([p.X for p in pairs])
    Y = np.stack([p.Y for p in pairs])
    F = np.array([p.F for p in pairs])
    return X, Y, F, lam


def loss_gradient(
    params: RingParams,
    X,
    Y,
    parents: Sequence[int],
    warmup=0,
    truncate: int | None = None,
    scale: float = 1.0,
):
    """Loss and exact reverse-mode gradient through the full unroll.

    With ``truncate=k`` the sequence is processed in chunks of ``k`` steps:
    the state is carried across chunks but gradients stop at the chunk
    boundaries.
    """
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    if X.ndim == 3:
        X, Y = X[None], Y[None]
    B, T = X.shape[:2]
    unroll = Unroll(params, parents)
    if truncate is None or truncate >= T:
        Yhat = unroll.forward(X)
        loss, dY = orientation_loss_and_grad(Yhat, Y, parents, warmup, scale)
        grads, _ = unroll.backward(dY)
    else:
        Yhat = np.empty(Y.shape)
        # the loss needs every prediction first, so chunks run twice
        state = None
        starts = list(range(0, T, truncate))
        states = []
        for s in starts:
            states.append(state)
            Yhat[:, s : s + truncate] = unroll.forward(X[:, s : s + truncate], state, keep=False)
            state = unroll.final_state
        loss, dY = orientation_loss_and_grad(Yhat, Y, parents, warmup, scale)
        grads = params.zeros_like()
        for s, st in zip(starts, states):
            unroll.forward(X[:, s : s + truncate], st)
            g, _ = unroll.backward(dY[:, s : s + truncate])
            for k in grads.tensors:
                grads.tensors[k] += g.tensors[k]
    for name, g in grads.tensors.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter block {name!r}")
    return loss, grads


class Adam:
    """Adam with cosine step-size decay and global-norm gradient clipping."""

    def __init__(self, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8, clip=1.0, total_steps=None):
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, b1, b2, eps, clip
        self.total_steps = total_steps
        self.t = 0
        self.m = None
        self.v = None

    def step_size(self) -> float:
        if not self.total_steps:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(self.t, self.total_steps) / self.total_steps))

    def update(self, params: RingParams, grads: RingParams) -> tuple[RingParams, float]:
        if self.m is None:
            self.m = params.zeros_like().tensors
            self.v = params.zeros_like().tensors
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.tensors.values()))
        factor = min(1.0, self.clip / gnorm) if self.clip and gnorm > 0 else 1.0
        lr = self.step_size()
        self.t += 1
        new = {}
        for k, p in params.tensors.items():
            g = grads.tensors[k] * factor
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            new[k] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return RingParams(params.H, params.M, new), gnorm


@dataclass
class TrainConfig:
    H: int = 32
    M: int = 16
    batch_size: int = 16
    timesteps: int = 500
    steps: int = 1000
    n_train: int = 2000
    lr: float = 3e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    cosine: bool = True
    rate_set: tuple[float, ...] = DEFAULT_RATES
    flags: AblationFlags = field(default_factory=AblationFlags)
    parents: tuple[int, ...] = (0, 1, 2)
    noise: bool = True
    warmup_s: float = 1.0
    truncate: int | None = None
    val_count: int = 32
    val_every: int = 100
    val_exclude_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def imu_model(self) -> ImuModel:
        return ImuModel() if self.noise else ImuModel.noiseless()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = self.flags.names()
        return d


def _warmup_steps(F, warmup_s: float, T: int):
    return np.minimum(np.ceil(np.asarray(F) * warmup_s).astype(int), T - 1)


def _seeds(seed: int):
    data, val, init, order = np.random.SeedSequence(seed).spawn(4)
    return data, val, init, order


def train(
    config: TrainConfig,
    data: Sequence[TrainingPair] | None = None,
    val_data: Sequence[TrainingPair] | None = None,
    init: RingParams | None = None,
    log_file=None,
    ranges: RcmgRanges = RcmgRanges(),
):
    """Train from scratch (or from ``init``) on RCMG data.

    Returns ``(params, records)``; each record holds ``step``, ``loss``,
    ``val_mae`` (or ``None``) and ``wall_time``. Records are also written as
    JSON lines to ``log_file`` when given.
    """
    s_data, s_val, s_init, s_order = _seeds(config.seed)
    params = init.copy() if init is not None else init_params(config.H, config.M, s_init)
    if config.steps == 0:
        return params, []

    if data is None:
        data = generate_batch(
            s_data, config.n_train, config.flags, config.rate_set, config.timesteps,
            config.parents, config.imu_model(), ranges,
        )
    if val_data is None and config.val_count > 0:
        val_data = generate_batch(
            s_val, config.val_count, config.flags, config.rate_set, config.timesteps,
            config.parents, config.imu_model(), ranges,
        )
    X_all, Y_all, F_all, lam = stack_pairs(data)
    T = X_all.shape[1]
    warm_all = _warmup_steps(F_all, config.warmup_s, T)

    def validate(p):
        if not val_data:
            return None
        Xv, Yv, Fv, _ = stack_pairs(val_data)
        Yh = Unroll(p, lam).forward(Xv, keep=False)
        return float(np.mean([mae_deg(Yh[b], Yv[b], lam, Fv[b], config.val_exclude_s) for b in range(len(Xv))]))

    opt = Adam(config.lr, config.b1, config.b2, config.eps, config.clip,
               config.steps if config.cosine else None)
    rng = np.random.default_rng(s_order)
    order = rng.permutation(len(X_all))
    cursor = 0
    records = []
    start = time.perf_counter()
    sink = open(log_file, "a") if isinstance(log_file, str) else log_file
    try:
        for step in range(1, config.steps + 1):
            if cursor + config.batch_size > len(order):
                order = rng.permutation(len(X_all))
                cursor = 0
            idx = np.sort(order[cursor : cursor + config.batch_size])
            cursor += config.batch_size
            loss, grads = loss_gradient(
                params, X_all[idx], Y_all[idx], lam, warm_all[idx], config.truncate
            )
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite at step {step}")
            params, gnorm = opt.update(params, grads)
            if not params.all_finite():
                raise TrainingDivergedError(f"parameters became non-finite at step {step}")
            val = validate(params) if config.val_every and step % config.val_every == 0 else None
            if step == config.steps and val is None:
                val = validate(params)
            rec = {"step": step, "loss": loss, "grad_norm": gnorm, "val_mae": val,
                   "wall_time": time.perf_counter() - start}
            records.append(rec)
            if sink is not None:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if val is not None:
                log.info("step %d loss %.4f val MAE %.2f deg", step, loss, val)
    finally:
        if isinstance(log_file, str) and sink is not None:
            sink.close()
    return params, records
