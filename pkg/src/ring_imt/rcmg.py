"""Random chain motion generator.

Produces randomized kinematic chains, smooth random motions of them,
simulated 6D IMU signals (optionally through a spring-damper attachment)
and the resulting ``(X, Y)`` training pairs. Every function is a pure
function of its seed: identical seeds give bit-identical output.

Input tensor layout, ``X[t, i, :]`` for body row ``i``:

====== ==========================================================
0:3    gyroscope, rad/s, sensor frame (zeros if body has no IMU)
3:6    accelerometer specific force, m/s^2 (zeros if no IMU)
6:9    hinge axis in the parent frame (zeros if unknown or root)
9      inverse sampling rate ``1/F`` in seconds
====== ==========================================================

``Y[t, i]`` is the orientation from body ``i`` to its parent, or to the
earth frame for the root body.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .kinematics import BodyPose, ChainConfig, ImuAttachment, children_of, forward_kinematics, relative_orientations, validate_parent_array
from .quat import (
    _mul_raw,
    normalize,
    quat_conj,
    quat_from_axis_angle,
    quat_from_rotvec,
    quat_mul,
    quat_rotate,
    quat_to_rotvec,
)

__all__ = [
    "DEFAULT_RATES",
    "AblationFlags",
    "RcmgRanges",
    "ImuModel",
    "MotionSequence",
    "TrainingPair",
    "SimulationInstabilityError",
    "RateError",
    "LayoutError",
    "sample_chain_config",
    "sample_motion",
    "rigid_imu_pose",
    "simulate_nonrigid_imu",
    "synthesize_imu",
    "assemble_training_pair",
    "generate_pair",
    "generate_batch",
]

DEFAULT_RATES = (40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0, 180.0, 200.0)
GRAVITY = 9.81


class SimulationInstabilityError(RuntimeError):
    """The spring-damper integration produced non-finite states."""


class RateError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    """The three challenge switches: nonrigid attachment, unknown axes, sparse IMUs."""

    nonrigid: bool = False
    misaligned: bool = False
    sparse: bool = False

    NAMES = ("nonrigid", "misaligned", "sparse")

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "AblationFlags":
        names = [n.strip() for n in names if n.strip()]
        unknown = set(names) - set(cls.NAMES)
        if unknown:
            raise ValueError(f"unknown flag(s): {', '.join(sorted(unknown))}")
        if len(set(names)) != len(names):
            raise ValueError("flag given more than once")
        return cls(**{n: True for n in names})

    def names(self) -> list[str]:
        return [n for n in self.NAMES if getattr(self, n)]


@dataclass(frozen=True)
class RcmgRanges:
    """Randomization ranges, all in SI units.

    Pairs are ``(low, high)``. Stiffness is per unit mass / inertia, so
    it is a squared natural frequency in (rad/s)^2.
    """

    segment_length: tuple[float, float] = (0.1, 0.5)
    imu_lateral: float = 0.05
    waypoint_interval: tuple[float, float] = (0.5, 4.0)
    joint_angle: tuple[float, float] = (-math.pi, math.pi)
    max_joint_rate: float = 10.0
    base_tilt: float = math.pi / 3
    max_base_rate: float = 5.0
    base_translation: float = 0.5
    max_base_speed: float = 1.0
    stiffness_t: tuple[float, float] = (1e3, 1e5)
    stiffness_r: tuple[float, float] = (1e3, 1e5)
    damping_ratio: tuple[float, float] = (0.1, 10.0)
    fine_rate: float = 1000.0

    @classmethod
    def from_text(cls, text: str) -> "RcmgRanges":
        """Parse ``key = value`` lines; pairs are written ``low, high``."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.read_string("[rcmg]\n" + text)
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in parser["rcmg"].items():
            if key not in known:
                raise ValueError(f"unknown range key {key!r}")
            parts = [float(p) for p in raw.replace(",", " ").split()]
            default = getattr(cls, key)
            if isinstance(default, tuple):
                if len(parts) != 2 or parts[0] > parts[1]:
                    raise ValueError(f"{key}: expected 'low, high'")
                kwargs[key] = (parts[0], parts[1])
            else:
                if len(parts) != 1:
                    raise ValueError(f"{key}: expected one number")
                kwargs[key] = parts[0]
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RcmgRanges":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class ImuModel:
    gravity: float = GRAVITY
    noise_std_gyro: float = 0.01
    noise_std_acc: float = 0.1
    bias_range_gyro: float = 0.01
    bias_range_acc: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if f.name != "gravity" and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def noiseless(cls) -> "ImuModel":
        return cls(noise_std_gyro=0.0, noise_std_acc=0.0, bias_range_gyro=0.0, bias_range_acc=0.0)


@dataclass
class TrainingPair:
    X: np.ndarray  # (T, N, 10)
    Y: np.ndarray  # (T, N, 4)
    F: float
    parents: tuple[int, ...]

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]

    def validate(self, atol: float = 1e-6) -> None:
        T, N = self.X.shape[:2]
        if self.X.shape != (T, N, 10) or self.Y.shape != (T, N, 4) or len(self.parents) != N:
            raise LayoutError(f"inconsistent shapes X{self.X.shape} Y{self.Y.shape} N={len(self.parents)}")
        if not np.all(self.X[..., 9] == self.X[0, 0, 9]):
            raise LayoutError("inverse sampling rate channel is not constant")
        norms = np.linalg.norm(self.Y, axis=-1)
        bad = np.argwhere(np.abs(norms - 1.0) > atol)
        if len(bad):
            t, i = bad[0]
            raise LayoutError(f"Y[{t}, {i}] is not a unit quaternion (norm {norms[t, i]:.9g})")


# --------------------------------------------------------------------------- #
# configuration


def _rng(seed):
    return np.random.default_rng(seed)


def _seed_seq(seed) -> np.random.SeedSequence:
    """Fresh SeedSequence; copies an existing one so spawning never depends on its history."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_chain_config(
    seed,
    flags: AblationFlags = AblationFlags(),
    parents: Sequence[int] = (0, 1, 2),
    ranges: RcmgRanges = RcmgRanges(),
) -> ChainConfig:
    """Draw a random chain: geometry, hinge axes and IMU attachments.

    With ``flags.sparse`` only the root and leaf bodies carry IMUs, which
    for the three-body chain removes the middle IMU.
    """
    lam = validate_parent_array(parents)
    n = len(lam)
    rng = _rng(seed)
    lengths = rng.uniform(*ranges.segment_length, size=n)
    axes = rng.standard_normal((n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    axes[[i for i, p in enumerate(lam) if p == 0]] = 0.0

    kids = children_of(lam)
    if flags.sparse:
        present = np.array([p == 0 or not kids[i] for i, p in enumerate(lam)])
    else:
        present = np.ones(n, dtype=bool)

    attachments = []
    for i in range(n):
        # draw everything unconditionally so flags never shift the stream
        offset = (
            float(rng.uniform(0.0, lengths[i])),
            float(rng.uniform(-ranges.imu_lateral, ranges.imu_lateral)),
            float(rng.uniform(-ranges.imu_lateral, ranges.imu_lateral)),
        )
        kt = _log_uniform(rng, *ranges.stiffness_t)
        kr = _log_uniform(rng, *ranges.stiffness_r)
        zt = _log_uniform(rng, *ranges.damping_ratio)
        zr = _log_uniform(rng, *ranges.damping_ratio)
        if not present[i]:
            attachments.append(ImuAttachment("none", offset))
        elif flags.nonrigid:
            attachments.append(
                ImuAttachment("nonrigid", offset, kt, 2 * zt * math.sqrt(kt), kr, 2 * zr * math.sqrt(kr))
            )
        else:
            attachments.append(ImuAttachment("rigid", offset))
    axis_known = np.full(n, not flags.misaligned)
    return ChainConfig(lam, lengths, axes, tuple(attachments), axis_known, present)


# --------------------------------------------------------------------------- #
# motion


@dataclass
class _Waypoints:
    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        """Cosine-smoothed interpolation: C1, zero slope at every waypoint."""
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0 = self.times[k]
        span = self.times[k + 1] - t0
        s = np.clip((t - t0) / span, 0.0, 1.0)
        w = 0.5 * (1.0 - np.cos(np.pi * s))
        return self.values[k] + (self.values[k + 1] - self.values[k]) * w


def _random_waypoints(rng, duration, interval, lo, hi, max_rate, start, wrap=False):
    """Waypoints with random spacing whose peak interpolated rate stays below ``max_rate``."""
    times = [0.0]
    values = [start]
    while times[-1] < duration:
        dt = rng.uniform(*interval)
        target = rng.uniform(lo, hi)
        if wrap:
            target = values[-1] + target
        step_max = max_rate * 2.0 * dt / math.pi
        step = float(np.clip(target - values[-1], -step_max, step_max))
        times.append(times[-1] + dt)
        values.append(float(np.clip(values[-1] + step, lo, hi)) if not wrap else values[-1] + step)
    return _Waypoints(np.array(times), np.array(values))


@dataclass
class MotionSequence:
    """Smooth random motion of a chain, sampled on a fine time grid.

    ``at(times)`` evaluates the underlying smooth trajectories anywhere.
    """

    fine_rate: float
    duration: float
    base_pose: BodyPose  # arrays of shape (n_fine, 4) / (n_fine, 3)
    joint_angles: np.ndarray  # (n_fine, n_joints)
    _yaw: _Waypoints = field(repr=False)
    _pitch: _Waypoints = field(repr=False)
    _roll: _Waypoints = field(repr=False)
    _pos: tuple = field(repr=False)
    _joints: tuple = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.fine_rate

    @property
    def n_samples(self) -> int:
        return self.joint_angles.shape[0]

    def at(self, times) -> tuple[BodyPose, np.ndarray]:
        times = np.asarray(times, dtype=float)
        ez, ey, ex = np.eye(3)[2], np.eye(3)[1], np.eye(3)[0]
        q = _mul_raw(
            _mul_raw(quat_from_axis_angle(ez, self._yaw(times)), quat_from_axis_angle(ey, self._pitch(times))),
            quat_from_axis_angle(ex, self._roll(times)),
        )
        pos = np.stack([w(times) for w in self._pos], axis=-1)
        if self._joints:
            ang = np.stack([w(times) for w in self._joints], axis=-1)
        else:
            ang = np.zeros(times.shape + (0,))
        return BodyPose(normalize(q), pos), ang


def sample_motion(seed, config: ChainConfig, duration: float, ranges: RcmgRanges = RcmgRanges()) -> MotionSequence:
    """Random smooth motion: waypoint hinge angles plus a 6-DoF base trajectory.

    Every motion starts from the rest pose: all hinge angles zero and the
    base untilted (random heading).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = _rng(seed)
    iv = ranges.waypoint_interval
    yaw0 = rng.uniform(-math.pi, math.pi)
    yaw = _random_waypoints(rng, duration, iv, -math.pi, math.pi, ranges.max_base_rate, yaw0, wrap=True)
    pitch = _random_waypoints(rng, duration, iv, -ranges.base_tilt, ranges.base_tilt, ranges.max_base_rate, 0.0)
    roll = _random_waypoints(rng, duration, iv, -ranges.base_tilt, ranges.base_tilt, ranges.max_base_rate, 0.0)
    b = ranges.base_translation
    pos = tuple(_random_waypoints(rng, duration, iv, -b, b, ranges.max_base_speed, 0.0) for _ in range(3))
    joints = tuple(
        _random_waypoints(rng, duration, iv, *ranges.joint_angle, ranges.max_joint_rate, 0.0)
        for _ in config.joint_bodies
    )
    n = int(round(duration * ranges.fine_rate)) + 1
    motion = MotionSequence(
        ranges.fine_rate, float(duration), None, None, yaw, pitch, roll, pos, joints  # type: ignore[arg-type]
    )
    motion.base_pose, motion.joint_angles = motion.at(np.arange(n) / ranges.fine_rate)
    return motion


# --------------------------------------------------------------------------- #
# IMU attachment and synthesis


def rigid_imu_pose(body: BodyPose, offset) -> BodyPose:
    """Pose of an IMU rigidly mounted at ``offset`` (body frame), axes aligned with the body."""
    return BodyPose(body.orientation, body.position + quat_rotate(body.orientation, np.asarray(offset, float)))


def _angular_rate(q, rate, frame="body"):
    """Angular velocity from an orientation sequence by central differences."""
    q = np.asarray(q, float)
    n = len(q)
    if n < 2:
        return np.zeros((n, 3))
    dt = 1.0 / rate
    prev = np.concatenate([q[:1], q[:-2], q[-2:-1]])
    nxt = np.concatenate([q[1:2], q[2:], q[-1:]])
    span = np.full(n, 2.0 * dt)
    span[0] = span[-1] = dt
    if frame == "body":
        d = _mul_raw(quat_conj(prev), nxt)
    else:
        d = _mul_raw(nxt, quat_conj(prev))
    return quat_to_rotvec(d) / span[:, None]


def _acceleration(p, rate):
    dt = 1.0 / rate
    a = np.zeros_like(p)
    if len(p) >= 3:
        a[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt**2
        a[0] = a[1]
        a[-1] = a[-2]
    return a


def simulate_nonrigid_imu(body_poses: BodyPose, attachment: ImuAttachment, fine_rate: float) -> BodyPose:
    """IMU world pose when coupled to its nominal mount by spring-dampers.

    The IMU is a unit-mass, unit-inertia body pulled toward the rigid
    mount pose by a translational and a rotational spring-damper. The
    integration is semi-implicit Euler: velocities first (damping taken
    implicitly), positions / orientations with the new velocities.
    """
    if attachment.kind != "nonrigid":
        raise ValueError("attachment is not nonrigid")
    nominal = rigid_imu_pose(body_poses, attachment.offset)
    qn = np.asarray(nominal.orientation, float)
    pn = np.asarray(nominal.position, float)
    n = len(qn)
    dt = 1.0 / fine_rate
    vn = np.gradient(pn, dt, axis=0) if n > 1 else np.zeros_like(pn)
    wn = _angular_rate(qn, fine_rate, frame="world")

    kt, dt_, kr, dr = attachment.stiffness_t, attachment.damping_t, attachment.stiffness_r, attachment.damping_r
    gain_t = 1.0 / (1.0 + dt * dt_)
    gain_r = 1.0 / (1.0 + dt * dr)

    pos = np.empty_like(pn)
    ori = np.empty_like(qn)
    p = pn[0].copy()
    v = vn[0].copy()
    q = qn[0].copy()
    w = wn[0].copy()
    pos[0] = p
    ori[0] = q
    with np.errstate(over="ignore", invalid="ignore"):  # blow-ups are reported below
        for j in range(1, n):
            v = (v + dt * (-kt * (p - pn[j - 1]) + dt_ * vn[j - 1])) * gain_t
            p = p + dt * v
            err = quat_to_rotvec(_mul_raw(q, quat_conj(qn[j - 1])))
            w = (w + dt * (-kr * err + dr * wn[j - 1])) * gain_r
            q = _mul_raw(quat_from_rotvec(w * dt), q)
            q = q / math.sqrt(q @ q)
            pos[j] = p
            ori[j] = q
            if j % 1000 == 0 and not (np.isfinite(p).all() and np.isfinite(q).all()):
                raise SimulationInstabilityError(f"non-finite IMU state at fine step {j}")
    if not (np.isfinite(pos).all() and np.isfinite(ori).all()):
        raise SimulationInstabilityError("non-finite IMU state")
    return BodyPose(ori, pos)


def _lowpass_resample(sig, fine_rate, F, T):
    """Zero-phase anti-alias low-pass at ``0.4 F`` then linear interpolation at ``k / F``."""
    n = len(sig)
    if F < fine_rate / 2 and n > 27:
        sos = signal.butter(4, 0.4 * F, fs=fine_rate, output="sos")
        sig = signal.sosfiltfilt(sos, sig, axis=0)
    t_fine = np.arange(n) / fine_rate
    t_out = np.arange(T) / F
    return np.stack([np.interp(t_out, t_fine, sig[:, c]) for c in range(sig.shape[1])], axis=-1)


def n_timesteps(duration: float, F: float) -> int:
    return int(round(duration * F))


def synthesize_imu(
    imu_pose: BodyPose,
    fine_rate: float,
    F: float,
    model: ImuModel = ImuModel(),
    seed=0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gyroscope and accelerometer readings at rate ``F`` from a fine-rate pose sequence.

    A static, upright sensor reads ``(0, 0, +g)``.
    """
    if F > fine_rate:
        raise RateError(f"output rate {F} Hz exceeds the simulation rate {fine_rate} Hz")
    if F <= 0:
        raise RateError("output rate must be positive")
    q = np.asarray(imu_pose.orientation, float)
    p = np.asarray(imu_pose.position, float)
    gyro = _angular_rate(q, fine_rate, frame="body")
    a_world = _acceleration(p, fine_rate) + np.array([0.0, 0.0, model.gravity])
    acc = quat_rotate(quat_conj(q), a_world)

    T = n_timesteps((len(q) - 1) / fine_rate, F)
    gyro = _lowpass_resample(gyro, fine_rate, F, T)
    acc = _lowpass_resample(acc, fine_rate, F, T)

    rng = _rng(seed)
    gyro = gyro + rng.uniform(-model.bias_range_gyro, model.bias_range_gyro, 3)
    acc = acc + rng.uniform(-model.bias_range_acc, model.bias_range_acc, 3)
    gyro = gyro + model.noise_std_gyro * rng.standard_normal(gyro.shape)
    acc = acc + model.noise_std_acc * rng.standard_normal(acc.shape)
    return gyro, acc


def assemble_training_pair(
    config: ChainConfig,
    parents: Sequence[int],
    motion: MotionSequence,
    imu: dict[int, tuple[np.ndarray, np.ndarray]],
    F: float,
) -> TrainingPair:
    """Lay out one training pair.

    ``imu`` maps 0-based body rows to ``(gyro, acc)`` arrays at rate ``F``.
    Targets come from forward kinematics evaluated at ``k / F``.
    """
    lam = validate_parent_array(parents)
    n = len(lam)
    T = n_timesteps(motion.duration, F)
    times = np.arange(T) / F
    base, angles = motion.at(times)
    poses = forward_kinematics(config, lam, base, angles)
    Y = relative_orientations(poses, lam)

    X = np.zeros((T, n, 10))
    for i in range(n):
        if config.imu_present[i]:
            if i not in imu:
                raise LayoutError(f"missing IMU signals for body {i + 1}")
            gyro, acc = imu[i]
            if gyro.shape != (T, 3) or acc.shape != (T, 3):
                raise LayoutError(f"body {i + 1}: IMU signals have {len(gyro)} samples, expected {T}")
            X[:, i, 0:3] = gyro
            X[:, i, 3:6] = acc
        if config.axis_known[i] and lam[i] != 0:
            X[:, i, 6:9] = config.joint_axes[i]
    X[:, :, 9] = 1.0 / F
    pair = TrainingPair(X, Y, float(F), lam)
    pair.validate()
    return pair


def generate_pair(
    seed,
    F: float,
    duration: float,
    flags: AblationFlags = AblationFlags(),
    parents: Sequence[int] = (0, 1, 2),
    model: ImuModel = ImuModel(),
    ranges: RcmgRanges = RcmgRanges(),
) -> TrainingPair:
    """Full pipeline for one sequence from a single seed."""
    s_cfg, s_motion, s_imu = _seed_seq(seed).spawn(3)
    config = sample_chain_config(s_cfg, flags, parents, ranges)
    motion = sample_motion(s_motion, config, duration, ranges)
    poses = forward_kinematics(config, config.parents, motion.base_pose, motion.joint_angles)
    imu_seeds = s_imu.spawn(config.n_bodies)
    signals = {}
    for i, att in enumerate(config.attachments):
        if att.kind == "none":
            continue
        if att.kind == "rigid":
            imu_pose = rigid_imu_pose(poses[i], att.offset)
        else:
            imu_pose = simulate_nonrigid_imu(poses[i], att, motion.fine_rate)
        signals[i] = synthesize_imu(imu_pose, motion.fine_rate, F, model, imu_seeds[i])
    return assemble_training_pair(config, config.parents, motion, signals, F)


def generate_batch(
    seed,
    count: int,
    flags: AblationFlags = AblationFlags(),
    rate_set: Sequence[float] = DEFAULT_RATES,
    timesteps: int = 6000,
    parents: Sequence[int] = (0, 1, 2),
    model: ImuModel = ImuModel(),
    ranges: RcmgRanges = RcmgRanges(),
) -> list[TrainingPair]:
    """``count`` independent pairs, all with ``timesteps`` samples.

    Each sequence draws its rate uniformly from ``rate_set`` and lasts
    ``timesteps / F`` seconds. Sequence ``k`` depends only on
    ``(seed, k)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rates = [float(r) for r in rate_set]
    if not rates:
        raise ValueError("rate_set is empty")
    pairs = []
    for child in _seed_seq(seed).spawn(count):
        s_rate, s_pair = child.spawn(2)
        F = rates[int(_rng(s_rate).integers(len(rates)))]
        pairs.append(generate_pair(s_pair, F, timesteps / F, flags, parents, model, ranges))
    return pairs

