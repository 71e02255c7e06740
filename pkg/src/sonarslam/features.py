"""Sparse oriented-surface-point clouds and voxel-occupancy overlap."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .core import RigidPose, as_cloud

__all__ = [
    "OrientedCloud",
    "voxel_keys",
    "pack_keys",
    "unpack_keys",
    "occupied_voxels",
    "extract_oriented_surface_points",
    "occupancy_overlap",
    "MIN_SUPPORT",
]

# a voxel needs strictly more than 6 neighbours to produce a surface point
MIN_SUPPORT = 7
_DEGENERATE_RATIO = 1e-12
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


def voxel_keys(points: np.ndarray, size: float) -> np.ndarray:
    """Integer voxel indices ``floor(x / size)`` for every point, shape (N, 3)."""
    return np.floor(np.asarray(points, dtype=float) / size).astype(np.int64)


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer voxel indices into single int64 hashes."""
    k = np.asarray(keys, dtype=np.int64) + _KEY_OFFSET
    if k.size and (k.min() < 0 or k.max() > _KEY_MASK):
        raise ValueError("voxel index out of packable range")
    return (k[..., 0] << (2 * _KEY_BITS)) | (k[..., 1] << _KEY_BITS) | k[..., 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.int64)
    out = np.empty(packed.shape + (3,), dtype=np.int64)
    out[..., 0] = (packed >> (2 * _KEY_BITS)) & _KEY_MASK
    out[..., 1] = (packed >> _KEY_BITS) & _KEY_MASK
    out[..., 2] = packed & _KEY_MASK
    return out - _KEY_OFFSET


def occupied_voxels(points: np.ndarray, size: float) -> np.ndarray:
    """Sorted unique packed keys of voxels holding at least one point."""
    pts = as_cloud(points)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.unique(pack_keys(voxel_keys(pts, size)))


@dataclass(frozen=True, eq=False)
class OrientedCloud:
    """Per-voxel surface points: sample means, unit normals and support counts."""

    means: np.ndarray
    normals: np.ndarray
    support: np.ndarray
    resolution: float

    def __len__(self) -> int:
        return len(self.means)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.means)

    @classmethod
    def empty(cls, resolution: float) -> "OrientedCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64), resolution)

    def transformed(self, pose: RigidPose) -> "OrientedCloud":
        """Rigidly move the surface points; normals only rotate."""
        return OrientedCloud(
            pose.apply(self.means), self.normals @ pose.rotation.T, self.support, self.resolution
        )


def extract_oriented_surface_points(cloud, r: float, sensor_origin=(0.0, 0.0, 0.0)) -> OrientedCloud:
    """Summarise a cloud as one oriented surface point per occupied voxel of size ``r``.

    For every occupied voxel, all points within ``r`` of the voxel's point centroid are
    gathered (this reaches into neighbouring voxels). Voxels with more than six such
    points emit their sample mean and the eigenvector of the sample covariance with the
    smallest eigenvalue, flipped to face ``sensor_origin``.
    """
    if r <= 0:
        raise ValueError("resolution must be positive")
    pts = as_cloud(cloud)
    if len(pts) < MIN_SUPPORT:
        return OrientedCloud.empty(r)

    _, inverse, counts = np.unique(
        pack_keys(voxel_keys(pts, r)), return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    centroids = np.stack(
        [np.bincount(inverse, weights=pts[:, i]) for i in range(3)], axis=1
    ) / counts[:, None]

    tree = cKDTree(pts)
    n_near = tree.query_ball_point(centroids, r, return_length=True)
    keep = n_near >= MIN_SUPPORT
    if not np.any(keep):
        return OrientedCloud.empty(r)
    centroids = centroids[keep]
    neighbours = tree.query_ball_point(centroids, r, return_sorted=True)
    lengths = np.fromiter((len(n) for n in neighbours), dtype=np.int64, count=len(neighbours))
    flat = np.concatenate([np.asarray(n, dtype=np.int64) for n in neighbours])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])

    gathered = pts[flat]
    means = np.add.reduceat(gathered, starts, axis=0) / lengths[:, None]
    centred = gathered - np.repeat(means, lengths, axis=0)
    outer = centred[:, :, None] * centred[:, None, :]
    cov = np.add.reduceat(outer, starts, axis=0) / (lengths - 1)[:, None, None]

    evals, evecs = np.linalg.eigh(cov)
    largest = np.maximum(evals[:, 2], np.finfo(float).tiny)
    degenerate = evals[:, 1] < _DEGENERATE_RATIO * largest
    normals = evecs[:, :, 0]

    toward = np.asarray(sensor_origin, dtype=float) - means
    flip = np.einsum("ij,ij->i", normals, toward) < 0
    normals = np.where(flip[:, None], -normals, normals)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    ok = ~degenerate
    return OrientedCloud(means[ok], normals[ok], lengths[ok], r)


def occupancy_overlap(a, b, r: float) -> float:
    """Fraction of the voxels occupied by ``a`` that ``b`` also occupies."""
    if r <= 0:
        raise ValueError("resolution must be positive")
    occ_a = occupied_voxels(a, r)
    if len(occ_a) == 0:
        raise ValueError("empty query cloud")
    occ_b = occupied_voxels(b, r)
    shared = np.intersect1d(occ_a, occ_b, assume_unique=True)
    return len(shared) / len(occ_a)
