"""Quaternion and 3-vector algebra.

Hamilton convention, scalar-first storage ``(w, x, y, z)``. A quaternion
``q_{i->j}`` maps coordinates of frame-``i`` vectors into frame ``j``, so
``quat_mul(a, b)`` applies ``b`` first and then ``a``.

Every function broadcasts over leading dimensions: quaternions are arrays
of shape ``(..., 4)`` and vectors ``(..., 3)``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DegenerateAxisError",
    "IDENTITY",
    "normalize",
    "quat_conj",
    "quat_mul",
    "quat_rotate",
    "quat_from_axis_angle",
    "quat_to_axis_angle",
    "quat_to_rotvec",
    "quat_from_rotvec",
    "quat_to_matrix",
    "quat_angle",
    "quat_angle_deg",
    "quat_integrate",
    "heading_decompose",
    "inclination",
    "inclination_angle",
    "slerp",
]

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# angles below this are reported as exactly zero
ANGLE_EPS = 1e-7


class DegenerateAxisError(ValueError):
    """Raised when a rotation axis has (numerically) zero length."""


def _as_float(a):
    return np.asarray(a, dtype=float)


def normalize(q):
    """Scale quaternions to unit norm; zero-norm rows become the identity."""
    q = _as_float(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    bad = n < 1e-300
    out = q / np.where(bad, 1.0, n)
    if np.any(bad):
        out = np.where(bad, IDENTITY, out)
    return out


def quat_conj(q):
    q = _as_float(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _mul_raw(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    # grouped so that conj(q) * q has an exactly zero vector part
    return np.stack(
        [
            aw * bw - (ax * bx + ay * by + az * bz),
            (aw * bx + ax * bw) + (ay * bz - az * by),
            (aw * by + ay * bw) + (az * bx - ax * bz),
            (aw * bz + az * bw) + (ax * by - ay * bx),
        ],
        axis=-1,
    )


def quat_mul(a, b):
    """Hamilton product ``a * b`` (apply ``b``, then ``a``), renormalized."""
    return normalize(_mul_raw(_as_float(a), _as_float(b)))


def quat_rotate(q, v):
    """Rotate vectors ``v`` by quaternions ``q``."""
    q = _as_float(q)
    v = _as_float(v)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_axis_angle(axis, angle):
    """Quaternion for a rotation by ``angle`` radians about ``axis``.

    The axis need not be unit length. A zero-length axis is accepted only
    together with a zero angle.
    """
    axis = _as_float(axis)
    angle = _as_float(angle)
    n = np.linalg.norm(axis, axis=-1)
    degenerate = (n <= 1e-12) & (angle != 0.0)
    if np.any(degenerate):
        raise DegenerateAxisError("rotation axis has zero length")
    unit = axis / np.where(n <= 1e-12, 1.0, n)[..., None]
    half = 0.5 * angle
    q = np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * unit], axis=-1)
    return q


def quat_to_axis_angle(q):
    """Return ``(axis, angle)`` with angle in ``[0, pi]``.

    The identity maps to axis ``(1, 0, 0)`` and angle 0.
    """
    q = normalize(q)
    q = np.where(q[..., :1] < 0.0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    small = s < 1e-15
    axis = q[..., 1:] / np.where(small, 1.0, s)[..., None]
    axis = np.where(small[..., None], np.array([1.0, 0.0, 0.0]), axis)
    return axis, angle


def quat_to_rotvec(q):
    axis, angle = quat_to_axis_angle(q)
    return axis * angle[..., None]


def quat_from_rotvec(r):
    r = _as_float(r)
    angle = np.linalg.norm(r, axis=-1)
    half = 0.5 * angle
    # sin(x/2)/x with its series near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(angle < 1e-8, 0.5 - angle**2 / 48.0, np.sin(half) / angle)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * r], axis=-1)


def quat_to_matrix(q):
    """Rotation matrix ``R`` with ``R @ v == quat_rotate(q, v)``."""
    w, x, y, z = np.moveaxis(normalize(q), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def quat_angle(a, b):
    """Absolute rotation angle in radians between ``a`` and ``b``, in ``[0, pi]``."""
    d = np.abs(np.sum(normalize(a) * normalize(b), axis=-1))
    d = np.clip(d, -1.0, 1.0)
    ang = 2.0 * np.arccos(d)
    return np.where(ang < ANGLE_EPS, 0.0, ang)


def quat_angle_deg(a, b):
    """Absolute rotation angle in degrees; symmetric and sign-invariant."""
    return np.degrees(quat_angle(a, b))


def quat_integrate(q, omega, dt):
    """Advance ``q`` by the body-frame angular rate ``omega`` held for ``dt``."""
    if np.any(np.asarray(dt) <= 0):
        raise ValueError("dt must be positive")
    dq = quat_from_rotvec(_as_float(omega) * dt)
    return quat_mul(q, dq)


def heading_decompose(q, up=(0.0, 0.0, 1.0)):
    """Swing-twist split ``q = heading * inclination`` about the ``up`` axis.

    ``heading`` is a pure rotation about ``up``; ``inclination`` has no
    rotation component about ``up``. When the twist is undefined (the
    inclination is a half turn) the heading is the identity.
    """
    q = normalize(q)
    up = _as_float(up)
    proj = np.sum(q[..., 1:] * up, axis=-1, keepdims=True) * up
    twist = np.concatenate([q[..., :1], np.broadcast_to(proj, q[..., 1:].shape)], axis=-1)
    n = np.linalg.norm(twist, axis=-1, keepdims=True)
    degenerate = n < 1e-12
    heading = np.where(degenerate, IDENTITY, twist / np.where(degenerate, 1.0, n))
    incl = _mul_raw(quat_conj(heading), q)
    return heading, incl


def inclination(q, up=(0.0, 0.0, 1.0)):
    return heading_decompose(q, up)[1]


def inclination_angle(a, b, up=(0.0, 0.0, 1.0)):
    """Angle in radians between the inclination parts of ``a`` and ``b``."""
    return quat_angle(inclination(a, up), inclination(b, up))


def slerp(a, b, s):
    """Shortest-arc spherical interpolation between ``a`` (s=0) and ``b`` (s=1)."""
    a = normalize(a)
    b = normalize(b)
    s = _as_float(s)
    dot = np.sum(a * b, axis=-1, keepdims=True)
    b = np.where(dot < 0.0, -b, b)
    rel = _mul_raw(quat_conj(a), b)
    r = quat_to_rotvec(rel)
    return quat_mul(a, quat_from_rotvec(r * s[..., None] if s.ndim else r * s))
