import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from sonarslam.core import (
    NearSingularRotation,
    RigidPose,
    SonarFrame,
    as_cloud,
    compose,
    exp,
    inverse,
    log,
    rot_z,
    transform_cloud,
)

from conftest import pose_strategy, random_pose


def homogeneous(p: RigidPose) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = p.rotation
    T[:3, 3] = p.translation
    return T


def assert_pose_close(a, b, tol=1e-9):
    np.testing.assert_allclose(a.rotation, b.rotation, atol=tol)
    np.testing.assert_allclose(a.translation, b.translation, atol=tol)


# compose / inverse


def test_compose_identity_left(rng):
    p = random_pose(rng)
    assert_pose_close(compose(RigidPose.identity(), p), p)


def test_compose_with_inverse_is_identity(rng):
    p = random_pose(rng)
    assert_pose_close(compose(p, inverse(p)), RigidPose.identity())


def test_compose_two_quarter_turns_matches_matrix_product():
    a = RigidPose(rot_z(np.pi / 2), [1.0, 0, 0])
    c = compose(a, a)
    np.testing.assert_allclose(c.as_matrix(), homogeneous(a) @ homogeneous(a), atol=1e-12)
    np.testing.assert_allclose(c.rotation, rot_z(np.pi), atol=1e-12)
    np.testing.assert_allclose(c.translation, [1.0, 1.0, 0.0], atol=1e-12)


def test_inverse_of_identity():
    assert_pose_close(inverse(RigidPose.identity()), RigidPose.identity(), 0.0)


def test_inverse_of_pure_translation():
    p = inverse(RigidPose.from_translation([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(p.translation, [-1.0, -2.0, -3.0])
    np.testing.assert_array_equal(p.rotation, np.eye(3))


def test_inverse_matches_matrix_inverse(rng):
    for _ in range(20):
        p = random_pose(rng)
        np.testing.assert_allclose(inverse(p).as_matrix(), np.linalg.inv(homogeneous(p)), atol=1e-12)
        assert_pose_close(compose(inverse(p), p), RigidPose.identity())


@given(pose_strategy(), pose_strategy(), pose_strategy())
def test_compose_is_associative(a, b, c):
    assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))


def test_long_composition_chain_stays_orthonormal(rng):
    step = random_pose(rng, trans_scale=0.1, max_angle=0.05)
    p = RigidPose.identity()
    for _ in range(10_000):
        p = compose(p, step)
    R = p.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        RigidPose(np.eye(3), [np.nan, 0, 0])


def test_quaternion_round_trip(rng):
    for _ in range(50):
        p = random_pose(rng)
        q = RigidPose.from_quaternion(p.quaternion(), p.translation)
        assert_pose_close(q, p, 1e-12)


def test_quaternion_is_xyzw():
    p = RigidPose(rot_z(np.pi / 2), [0, 0, 0])
    np.testing.assert_allclose(p.quaternion(), [0, 0, np.sin(np.pi / 4), np.cos(np.pi / 4)], atol=1e-12)


def test_yaw_from_euler_zyx():
    p = RigidPose.from_euler_zyx(0.3, -0.2, 0.1)
    assert p.yaw() == pytest.approx(0.3, abs=1e-12)
    expected = Rotation.from_euler("ZYX", [0.3, -0.2, 0.1]).as_matrix()
    np.testing.assert_allclose(p.rotation, expected, atol=1e-12)


# exp / log


def test_exp_of_zero_is_identity():
    assert_pose_close(exp(np.zeros(6)), RigidPose.identity(), 0.0)


def test_exp_quarter_turn_about_z():
    p = exp([0, 0, np.pi / 2, 0, 0, 0])
    np.testing.assert_allclose(p.rotation, rot_z(np.pi / 2), atol=1e-12)


def test_log_exp_round_trip_random(rng):
    for _ in range(1000):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        v = np.concatenate([axis * rng.uniform(0, 3.0), rng.uniform(-5, 5, 3)])
        np.testing.assert_allclose(log(exp(v)), v, atol=1e-9)


@given(pose_strategy(max_angle=np.pi - 1e-3))
def test_exp_log_round_trip_property(p):
    assert_pose_close(exp(log(p)), p)


def test_log_near_pi_is_reported():
    with pytest.raises(NearSingularRotation):
        log(RigidPose(rot_z(np.pi), np.zeros(3)))


# clouds


def test_transform_cloud_identity(rng):
    c = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(transform_cloud(RigidPose.identity(), c), c)


def test_transform_cloud_translation():
    out = transform_cloud(RigidPose.from_translation([0, 0, 1.0]), [[0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(out, [[0.0, 0.0, 1.0]])


def test_transform_cloud_preserves_distances(rng):
    c = rng.normal(size=(50, 3))
    p = random_pose(rng)
    np.testing.assert_allclose(pdist(transform_cloud(p, c)), pdist(c), atol=1e-12)


@given(pose_strategy(), pose_strategy())
def test_transform_cloud_respects_composition(a, b):
    c = np.random.default_rng(3).normal(size=(10, 3))
    np.testing.assert_allclose(
        transform_cloud(compose(a, b), c), transform_cloud(a, transform_cloud(b, c)), atol=1e-9
    )


def test_cloud_rejects_non_finite():
    with pytest.raises(ValueError):
        as_cloud([[0.0, np.inf, 0.0]])


def test_empty_cloud_has_shape():
    assert as_cloud([]).shape == (0, 3)


@given(st.integers(0, 5))
def test_sonar_frame_normalises_cloud(n):
    f = SonarFrame(0, 0.0, np.ones((n, 3), dtype=np.float32), RigidPose.identity())
    assert f.cloud.shape == (n, 3)
    assert f.cloud.dtype == np.float64
