import numpy as np
import pytest

from ring_imt.kinematics import (
    BodyPose,
    ChainConfig,
    CycleError,
    ForwardReferenceError,
    ImuAttachment,
    MultipleRootsError,
    ParentArrayError,
    forward_kinematics,
    relative_orientations,
    validate_parent_array,
)
from ring_imt.quat import IDENTITY, quat_angle_deg, quat_conj, quat_from_axis_angle, quat_mul
from ring_imt.rcmg import rigid_imu_pose

from conftest import random_quats


def chain(axes=((0, 0, 0), (0, 1, 0), (1, 0, 0)), lengths=(0.3, 0.2, 0.4)):
    n = len(lengths)
    return ChainConfig(tuple(range(n)), np.array(lengths), np.array(axes, float), (ImuAttachment(),) * n)


@pytest.mark.parametrize("parents", [(0, 1, 2), (0,), (0, 1, 1, 2, 4)])
def test_valid_parent_arrays(parents):
    assert validate_parent_array(parents) == parents


def test_forward_reference():
    with pytest.raises(ForwardReferenceError):
        validate_parent_array((2, 1, 0))


def test_self_parent_is_a_cycle():
    with pytest.raises(CycleError):
        validate_parent_array((0, 2))


def test_multiple_roots():
    with pytest.raises(MultipleRootsError):
        validate_parent_array((0, 0, 1))
    assert validate_parent_array((0, 0, 1), single_root=False) == (0, 0, 1)


@pytest.mark.parametrize("parents", [(), (0, 5), (-1,)])
def test_malformed(parents):
    with pytest.raises(ParentArrayError):
        validate_parent_array(parents)


def test_chain_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        chain(lengths=(0.3, -0.1, 0.2))
    with pytest.raises(ValueError):
        chain(axes=((0, 0, 0), (0, 2, 0), (1, 0, 0)))
    with pytest.raises(ValueError):
        ImuAttachment("nonrigid", (0, 0, 0), 1.0, 0.0, 1.0, 1.0)


def test_zero_angles_give_identity_and_cumulative_offsets():
    cfg = chain()
    poses = forward_kinematics(cfg, (0, 1, 2), BodyPose(IDENTITY, np.zeros(3)), np.zeros(2))
    for p in poses:
        np.testing.assert_allclose(p.orientation, IDENTITY)
    np.testing.assert_allclose([p.position for p in poses], [[0, 0, 0], [0.3, 0, 0], [0.5, 0, 0]], atol=1e-15)


def test_single_hinge_quarter_turn():
    cfg = chain()
    poses = forward_kinematics(cfg, (0, 1, 2), BodyPose(IDENTITY, np.zeros(3)), [np.pi / 2, 0.0])
    rel = relative_orientations(poses, (0, 1, 2))
    np.testing.assert_allclose(rel[1], quat_from_axis_angle([0, 1, 0], np.pi / 2), atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward_kinematics(chain(), (0, 1, 2), BodyPose(IDENTITY, np.zeros(3)), np.zeros(3))


def test_relative_orientations_recover_hinges(rng):
    n = 1000
    axes = rng.standard_normal((3, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    axes[0] = 0
    cfg = chain(axes=axes)
    base = BodyPose(random_quats(rng, n), rng.standard_normal((n, 3)))
    angles = rng.uniform(-np.pi, np.pi, (n, 2))
    rel = relative_orientations(forward_kinematics(cfg, (0, 1, 2), base, angles), (0, 1, 2))
    for j, body in enumerate((1, 2)):
        direct = quat_from_axis_angle(axes[body], angles[:, j])
        assert quat_angle_deg(rel[:, body], direct).max() < np.degrees(1e-9)
    assert quat_angle_deg(rel[:, 0], base.orientation).max() == 0.0


def test_rigid_imu_keeps_constant_relative_orientation(rng):
    q = random_quats(rng, 50)
    body = BodyPose(q, rng.standard_normal((50, 3)))
    imu = rigid_imu_pose(body, (0.1, 0.02, -0.01))
    rel = quat_mul(quat_conj(body.orientation), imu.orientation)
    assert quat_angle_deg(rel, IDENTITY).max() == 0.0
    np.testing.assert_allclose(np.linalg.norm(imu.position - body.position, axis=1), np.linalg.norm([0.1, 0.02, -0.01]))
