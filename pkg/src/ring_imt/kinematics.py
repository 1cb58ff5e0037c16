"""Kinematic chains: parent arrays, chain configurations, forward kinematics.

Bodies are numbered ``1..N``; body 0 is the earth frame. A parent array
``parents`` stores ``parents[i - 1]``, the parent of body ``i``. Arrays
indexed per body use 0-based rows, so row ``k`` belongs to body ``k + 1``.

Geometry convention: a body's origin sits at its inboard joint and its
child joint sits ``segment_length`` along the body's local x-axis. Hinge
axes are expressed in the parent frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .quat import quat_from_axis_angle, quat_mul, quat_rotate, quat_conj

__all__ = [
    "ParentArrayError",
    "CycleError",
    "ForwardReferenceError",
    "MultipleRootsError",
    "validate_parent_array",
    "children_of",
    "ImuAttachment",
    "ChainConfig",
    "BodyPose",
    "forward_kinematics",
    "relative_orientations",
]


class ParentArrayError(ValueError):
    pass


class CycleError(ParentArrayError):
    pass


class ForwardReferenceError(ParentArrayError):
    pass


class MultipleRootsError(ParentArrayError):
    pass


def validate_parent_array(parents: Sequence[int], single_root: bool = True) -> tuple[int, ...]:
    """Check that ``parents`` encodes a tree with parents preceding children.

    Returns the parent array as a tuple of ints. Raises a subclass of
    :class:`ParentArrayError` otherwise.
    """
    lam = tuple(int(p) for p in parents)
    if len(lam) == 0:
        raise ParentArrayError("parent array is empty")
    n = len(lam)
    for i, p in enumerate(lam, start=1):
        if p < 0 or p > n:
            raise ParentArrayError(f"body {i}: parent {p} out of range 0..{n}")
        if p == i:
            raise CycleError(f"body {i} is its own parent")
    for i, p in enumerate(lam, start=1):
        if p >= i:
            raise ForwardReferenceError(f"body {i}: parent {p} does not precede it")
    roots = [i for i, p in enumerate(lam, start=1) if p == 0]
    if single_root and len(roots) > 1:
        raise MultipleRootsError(f"bodies {roots} all attach to the earth frame")
    return lam


def children_of(parents: Sequence[int]) -> list[list[int]]:
    """0-based child rows for every 0-based body row."""
    kids: list[list[int]] = [[] for _ in parents]
    for i, p in enumerate(parents):
        if p > 0:
            kids[p - 1].append(i)
    return kids


@dataclass(frozen=True)
class ImuAttachment:
    """How an IMU is fixed to its body.

    ``kind`` is ``"none"``, ``"rigid"`` or ``"nonrigid"``. ``offset`` is the
    nominal IMU position in the body frame (m). The four spring-damper
    parameters are only meaningful for ``"nonrigid"`` and act on a unit
    mass / unit inertia IMU.
    """

    kind: str = "rigid"
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    stiffness_t: float = 0.0
    damping_t: float = 0.0
    stiffness_r: float = 0.0
    damping_r: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "rigid", "nonrigid"):
            raise ValueError(f"unknown attachment kind {self.kind!r}")
        if self.kind == "nonrigid":
            params = (self.stiffness_t, self.damping_t, self.stiffness_r, self.damping_r)
            if min(params) <= 0:
                raise ValueError("spring-damper parameters must be strictly positive")


@dataclass
class ChainConfig:
    parents: tuple[int, ...]
    segment_lengths: np.ndarray
    joint_axes: np.ndarray  # (N, 3); row of a root body is unused (zeros)
    attachments: tuple[ImuAttachment, ...]
    axis_known: np.ndarray = field(default=None)  # (N,) bool
    imu_present: np.ndarray = field(default=None)  # (N,) bool

    def __post_init__(self):
        self.parents = validate_parent_array(self.parents)
        n = len(self.parents)
        self.segment_lengths = np.asarray(self.segment_lengths, dtype=float)
        self.joint_axes = np.asarray(self.joint_axes, dtype=float)
        if self.axis_known is None:
            self.axis_known = np.ones(n, dtype=bool)
        if self.imu_present is None:
            self.imu_present = np.array([a.kind != "none" for a in self.attachments])
        self.axis_known = np.asarray(self.axis_known, dtype=bool)
        self.imu_present = np.asarray(self.imu_present, dtype=bool)
        if self.segment_lengths.shape != (n,) or self.joint_axes.shape != (n, 3):
            raise ValueError("segment_lengths / joint_axes do not match the body count")
        if len(self.attachments) != n:
            raise ValueError("need one attachment per body")
        if np.any(self.segment_lengths <= 0):
            raise ValueError("segment lengths must be positive")
        for i, p in enumerate(self.parents):
            if p != 0 and abs(np.linalg.norm(self.joint_axes[i]) - 1.0) > 1e-9:
                raise ValueError(f"joint axis of body {i + 1} is not unit length")

    @property
    def n_bodies(self) -> int:
        return len(self.parents)

    @property
    def joint_bodies(self) -> list[int]:
        """0-based rows of bodies connected to a parent body by a hinge."""
        return [i for i, p in enumerate(self.parents) if p != 0]


@dataclass
class BodyPose:
    """World pose of a body; arrays may carry leading time dimensions."""

    orientation: np.ndarray  # (..., 4) body -> world
    position: np.ndarray  # (..., 3) world frame, m


def forward_kinematics(
    config: ChainConfig,
    parents: Sequence[int],
    base_pose: BodyPose,
    joint_angles,
) -> list[BodyPose]:
    """World poses of all bodies from the base pose and hinge angles.

    ``joint_angles`` has shape ``(..., n_joints)`` with one column per hinge
    in body order (bodies whose parent is the earth frame have no hinge).
    Leading dimensions broadcast against those of ``base_pose``.
    """
    lam = validate_parent_array(parents)
    if lam != config.parents:
        raise ValueError("parent array does not match the chain configuration")
    joint_angles = np.asarray(joint_angles, dtype=float)
    joints = config.joint_bodies
    if joint_angles.shape[-1:] != (len(joints),):
        raise ValueError(
            f"expected {len(joints)} joint angles, got trailing shape {joint_angles.shape[-1:]}"
        )
    column = {b: k for k, b in enumerate(joints)}
    poses: list[BodyPose] = []
    for i, p in enumerate(lam):
        if p == 0:
            poses.append(
                BodyPose(np.asarray(base_pose.orientation, float), np.asarray(base_pose.position, float))
            )
            continue
        parent = poses[p - 1]
        hinge = quat_from_axis_angle(config.joint_axes[i], joint_angles[..., column[i]])
        offset = np.array([config.segment_lengths[p - 1], 0.0, 0.0])
        pos = parent.position + quat_rotate(parent.orientation, offset)
        poses.append(BodyPose(quat_mul(parent.orientation, hinge), pos))
    return poses


def relative_orientations(poses: Sequence[BodyPose], parents: Sequence[int]) -> np.ndarray:
    """Stack ``q_{i -> parent(i)}`` along axis -2; roots keep their world orientation."""
    out = []
    for i, p in enumerate(parents):
        q = poses[i].orientation
        if p != 0:
            q = quat_mul(quat_conj(poses[p - 1].orientation), q)
        out.append(q)
    return np.stack(out, axis=-2)
