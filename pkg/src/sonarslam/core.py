"""Rigid-body geometry shared by every stage of the pipeline.

Poses map points from a child frame into a parent frame: ``x_parent = R @ x_child + t``.
Composition follows the matrix product convention, so ``compose(a, b)`` is ``a @ b`` on
4x4 homogeneous matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "RigidPose",
    "SonarFrame",
    "NearSingularRotation",
    "as_cloud",
    "compose",
    "inverse",
    "exp",
    "log",
    "transform_cloud",
    "so3_exp",
    "so3_log",
    "so3_right_jacobian_inv",
    "skew",
    "rotation_angle",
    "rot_z",
]

# log() refuses rotations closer than this to pi
_PI_MARGIN = 1e-6


class NearSingularRotation(ValueError):
    """Raised when a rotation angle is too close to pi for a stable logarithm."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector, or of an (N, 3) batch."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, vectorised over leading dimensions."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)[..., None, None]
    K = skew(rotvec)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (or an (N, 3, 3) batch)."""
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def so3_right_jacobian_inv(rotvec: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): maps right-perturbations to changes of log(R)."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)[..., None, None]
    K = skew(rotvec)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + coef * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.linalg.norm(so3_log(R)))


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    # one Newton step of the polar iteration; error goes from e to O(e^2)
    return 0.5 * R @ (3.0 * np.eye(3) - R.T @ R)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidPose:
    """An element of SE(3) stored as rotation matrix + translation (meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "RigidPose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> "RigidPose":
        return cls(np.eye(3), t)

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "RigidPose":
        q = np.asarray(quat_xyzw, dtype=float)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ValueError("quaternion has zero or non-finite norm")
        q = q / norm
        return cls(Rotation.from_quat(q).as_matrix(), translation)

    @classmethod
    def from_euler_zyx(cls, yaw: float, pitch: float, roll: float, translation=(0.0, 0.0, 0.0)):
        """Build a pose from yaw/pitch/roll in radians (intrinsic Z-Y-X)."""
        R = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()
        return cls(R, translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def yaw(self) -> float:
        return float(Rotation.from_matrix(self.rotation).as_euler("ZYX")[0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidPose") -> "RigidPose":
        return compose(self, other)

    def __repr__(self) -> str:
        rv = so3_log(self.rotation)
        return f"RigidPose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    R = _orthonormalize(a.rotation @ b.rotation)
    return RigidPose(R, a.rotation @ b.translation + a.translation)


def inverse(a: RigidPose) -> RigidPose:
    Rt = a.rotation.T
    return RigidPose(Rt, -Rt @ a.translation)


def exp(twist) -> RigidPose:
    """Map a twist (rotation vector, translation) to a pose.

    The parameterisation is the product SO(3) x R^3: the translation part is used
    as-is, which keeps the optimizer Jacobians simple.
    """
    twist = np.asarray(twist, dtype=float).reshape(6)
    return RigidPose(so3_exp(twist[:3]), twist[3:])


def log(p: RigidPose) -> np.ndarray:
    """Inverse of :func:`exp`; returns ``[rotvec, translation]``."""
    rv = so3_log(p.rotation)
    if np.linalg.norm(rv) > np.pi - _PI_MARGIN:
        raise NearSingularRotation("rotation angle too close to pi for log()")
    return np.concatenate([rv, p.translation])


def as_cloud(points) -> np.ndarray:
    """Validate and return an (N, 3) float64 point array."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros((0, 3))
    pts = pts.reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains NaN or Inf")
    return pts


def transform_cloud(p: RigidPose, cloud) -> np.ndarray:
    return p.apply(as_cloud(cloud))


@dataclass(frozen=True, eq=False)
class SonarFrame:
    """One sonar ping: points in the sensor frame plus the odometry pose at capture time."""

    index: int
    timestamp: float
    cloud: np.ndarray
    odom_pose: RigidPose

    def __post_init__(self):
        object.__setattr__(self, "cloud", as_cloud(self.cloud))
