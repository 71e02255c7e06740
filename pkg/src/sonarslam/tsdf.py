"""Sparse space-carving TSDF volumes, meshing, and a global map built from movable submaps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .core import RigidPose, as_cloud, compose, inverse, rotation_angle
from .features import pack_keys, unpack_keys

__all__ = [
    "TsdfVolume",
    "TriangleMesh",
    "GlobalMapState",
    "integrate_frame",
    "coarse_point_cloud",
    "extract_mesh",
    "submap_contribution",
    "global_update",
    "rebuild_global",
    "reprocess_decision",
]

# global cells whose accumulated weight drops below this are considered retracted
_RETRACT_EPS = 1e-9


@numba.njit(cache=True)
def _carve(origin, points, voxel, trunc, lo, acc_sum, acc_cnt, touched):
    nx, ny, nz = acc_cnt.shape
    n_touched = 0
    ijk = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    t_max = np.empty(3)
    t_delta = np.empty(3)
    d = np.empty(3)
    for p in range(points.shape[0]):
        depth = 0.0
        for a in range(3):
            d[a] = points[p, a] - origin[a]
            depth += d[a] * d[a]
        depth = np.sqrt(depth)
        if depth < 1e-12:
            continue
        for a in range(3):
            d[a] /= depth
        length = depth + trunc
        for a in range(3):
            ijk[a] = np.int64(np.floor(origin[a] / voxel))
            if d[a] > 0:
                step[a] = 1
                t_max[a] = ((ijk[a] + 1) * voxel - origin[a]) / d[a]
                t_delta[a] = voxel / d[a]
            elif d[a] < 0:
                step[a] = -1
                t_max[a] = (ijk[a] * voxel - origin[a]) / d[a]
                t_delta[a] = -voxel / d[a]
            else:
                step[a] = 0
                t_max[a] = np.inf
                t_delta[a] = np.inf
        while True:
            s = depth
            for a in range(3):
                s -= ((ijk[a] + 0.5) * voxel - origin[a]) * d[a]
            if s > trunc:
                s = trunc
            elif s < -trunc:
                s = -trunc
            i = ijk[0] - lo[0]
            j = ijk[1] - lo[1]
            k = ijk[2] - lo[2]
            if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
                if acc_cnt[i, j, k] == 0.0:
                    touched[n_touched] = (i * ny + j) * nz + k
                    n_touched += 1
                acc_sum[i, j, k] += s
                acc_cnt[i, j, k] += 1.0
            a = 0
            if t_max[1] < t_max[a]:
                a = 1
            if t_max[2] < t_max[a]:
                a = 2
            if t_max[a] > length:
                break
            ijk[a] += step[a]
            t_max[a] += t_delta[a]
    return n_touched


@numba.njit(cache=True)
def _fuse(touched, acc_sum, acc_cnt, dd, dw, obs_weight, trunc, new_cells):
    # running weighted average of this frame's mean observation into each touched cell;
    # scratch accumulators are reset on the way
    n_new = 0
    for f in touched:
        cnt = acc_cnt[f]
        w_old = dw[f]
        if w_old == 0.0:
            new_cells[n_new] = f
            n_new += 1
        w_new = w_old + obs_weight * cnt
        v = (w_old * dd[f] + obs_weight * acc_sum[f]) / w_new
        dd[f] = min(max(v, -trunc), trunc)
        dw[f] = w_new
        acc_sum[f] = 0.0
        acc_cnt[f] = 0.0
    return n_new


class TsdfVolume:
    """Voxel field of signed distance ``d`` and weight ``w``; absent cells have ``w == 0``.

    Storage is a dense block that grows on demand; ``keys``/``d``/``w`` expose the present
    cells as arrays sorted by packed voxel key. Voxel ``(i, j, k)`` covers
    ``[i*s, (i+1)*s)`` per axis and is sampled at its center.
    """

    _MARGIN = 16

    def __init__(self, voxel_size: float = 0.1, truncation: float = 0.3, obs_weight: float = 1.0):
        if voxel_size <= 0 or truncation <= 0:
            raise ValueError("voxel_size and truncation must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.obs_weight = float(obs_weight)
        self._lo = np.zeros(3, dtype=np.int64)
        self._dd = np.zeros((0, 0, 0))
        self._dw = np.zeros((0, 0, 0))
        self._acc_sum = np.zeros((0, 0, 0))
        self._acc_cnt = np.zeros((0, 0, 0))
        # flat indices (into the dense block) of cells with positive weight, insertion order
        self._present = np.zeros(0, dtype=np.int64)
        self._sparse = None

    def __len__(self) -> int:
        return len(self._present)

    def copy(self) -> "TsdfVolume":
        v = TsdfVolume(self.voxel_size, self.truncation, self.obs_weight)
        v._lo, v._dd, v._dw = self._lo.copy(), self._dd.copy(), self._dw.copy()
        v._acc_sum = np.zeros(self._dd.shape)
        v._acc_cnt = np.zeros(self._dd.shape)
        v._present = self._present.copy()
        return v

    def _ensure(self, lo: np.ndarray, hi: np.ndarray) -> None:
        """Grow the dense block so voxel indices ``lo..hi`` (inclusive) fit."""
        cur_hi = self._lo + np.array(self._dd.shape) - 1
        if self._dd.size and np.all(lo >= self._lo) and np.all(hi <= cur_hi):
            return
        if self._dd.size:
            lo = np.minimum(lo, self._lo)
            hi = np.maximum(hi, cur_hi)
        new_lo = lo - self._MARGIN
        shape = tuple(int(x) for x in (hi + self._MARGIN - new_lo + 1))
        dd = np.zeros(shape)
        dw = np.zeros(shape)
        if self._dd.size:
            o = self._lo - new_lo
            sl = tuple(slice(o[a], o[a] + self._dd.shape[a]) for a in range(3))
            dd[sl] = self._dd
            dw[sl] = self._dw
            ijk = np.stack(np.unravel_index(self._present, self._dd.shape), axis=1) + o
            self._present = np.ravel_multi_index(tuple(ijk.T), shape).astype(np.int64)
        self._lo, self._dd, self._dw = new_lo, dd, dw
        self._acc_sum = np.zeros(shape)
        self._acc_cnt = np.zeros(shape)
        self._sparse = None

    def compact(self) -> None:
        """Release integration scratch space and trim storage to the occupied cells."""
        self._acc_sum = np.zeros((0, 0, 0))
        self._acc_cnt = np.zeros((0, 0, 0))
        if len(self._present) == 0:
            self._dd = np.zeros((0, 0, 0))
            self._dw = np.zeros((0, 0, 0))
            self._lo = np.zeros(3, dtype=np.int64)
            self._sparse = None
            return
        rel = np.stack(np.unravel_index(self._present, self._dd.shape), axis=1)
        lo, hi = rel.min(axis=0), rel.max(axis=0)
        sl = tuple(slice(lo[a], hi[a] + 1) for a in range(3))
        self._dd = np.ascontiguousarray(self._dd[sl])
        self._dw = np.ascontiguousarray(self._dw[sl])
        self._lo = self._lo + lo
        self._present = np.ravel_multi_index(tuple((rel - lo).T), self._dd.shape).astype(np.int64)
        self._sparse = None

    def _flat_to_ijk(self, flat: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(flat, self._dd.shape), axis=1).astype(np.int64) + self._lo

    def _cells(self):
        if self._sparse is None:
            # C order over (i, j, k) is also packed-key order
            flat = np.sort(self._present)
            self._sparse = (pack_keys(self._flat_to_ijk(flat)), self._dd.reshape(-1)[flat], self._dw.reshape(-1)[flat])
        return self._sparse

    @property
    def keys(self) -> np.ndarray:
        return self._cells()[0]

    @property
    def d(self) -> np.ndarray:
        return self._cells()[1]

    @property
    def w(self) -> np.ndarray:
        return self._cells()[2]

    @classmethod
    def from_cells(cls, ijk, d, w, voxel_size, truncation) -> "TsdfVolume":
        v = cls(voxel_size, truncation)
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        w = np.asarray(w, dtype=float).reshape(-1)
        d = np.clip(np.asarray(d, dtype=float).reshape(-1), -truncation, truncation)
        if len(ijk) == 0:
            return v
        if len(np.unique(pack_keys(ijk))) != len(ijk):
            raise ValueError("duplicate cells")
        v._ensure(ijk.min(axis=0), ijk.max(axis=0))
        keep = w > 0
        rel = ijk[keep] - v._lo
        v._dd[rel[:, 0], rel[:, 1], rel[:, 2]] = d[keep]
        v._dw[rel[:, 0], rel[:, 1], rel[:, 2]] = w[keep]
        v._present = np.ravel_multi_index(tuple(rel.T), v._dd.shape).astype(np.int64)
        return v

    @property
    def ijk(self) -> np.ndarray:
        return unpack_keys(self.keys)

    def centers(self) -> np.ndarray:
        return (self.ijk + 0.5) * self.voxel_size

    def lookup(self, packed: np.ndarray) -> np.ndarray:
        """Index of each packed key into ``keys``/``d``/``w``, or -1 where absent."""
        packed = np.asarray(packed, dtype=np.int64)
        keys = self.keys
        if len(keys) == 0:
            return np.full(packed.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(keys, packed), len(keys) - 1)
        return np.where(keys[pos] == packed, pos, -1)

    def near_surface_centers(self) -> np.ndarray:
        """Centers of present cells with ``|d|`` under half a voxel, in packed-key order."""
        flat = self._present
        sel = np.sort(flat[np.abs(self._dd.reshape(-1)[flat]) < 0.5 * self.voxel_size])
        return (self._flat_to_ijk(sel) + 0.5) * self.voxel_size


def integrate_frame(volume: TsdfVolume, sensor_origin, cloud) -> None:
    """Space-carving integration of one frame already expressed in the volume's frame.

    Every voxel along the ray from the sensor to ``truncation`` past each point receives
    an observation ``clamp(depth - along_ray_distance(center), -trunc, +trunc)``; the
    observations are fused into each cell by a weighted running average.
    """
    origin = np.asarray(sensor_origin, dtype=float).reshape(3)
    if not np.all(np.isfinite(origin)):
        raise ValueError("sensor origin must be finite")
    pts = as_cloud(cloud)
    if len(pts) == 0:
        return
    ray = pts - origin
    depth = np.linalg.norm(ray, axis=1)
    ok = depth >= 1e-12
    if not np.any(ok):
        return
    pts = np.ascontiguousarray(pts[ok])
    ends = pts + ray[ok] / depth[ok, None] * volume.truncation
    span = np.vstack([ends, origin[None, :]])
    vs = volume.voxel_size
    lo = np.floor(span.min(axis=0) / vs).astype(np.int64) - 1
    hi = np.floor(span.max(axis=0) / vs).astype(np.int64) + 1
    volume._ensure(lo, hi)
    if volume._acc_sum.shape != volume._dd.shape:
        volume._acc_sum = np.zeros(volume._dd.shape)
        volume._acc_cnt = np.zeros(volume._dd.shape)
    # a ray crosses at most three cell faces per voxel length plus its start cell
    cap = int(np.sum(np.ceil((depth[ok] + volume.truncation) / vs) * 3 + 4))
    touched = np.empty(min(cap, volume._dd.size), dtype=np.int64)
    n = _carve(origin, pts, vs, volume.truncation, volume._lo, volume._acc_sum, volume._acc_cnt, touched)
    new_cells = np.empty(n, dtype=np.int64)
    n_new = _fuse(touched[:n], volume._acc_sum.reshape(-1), volume._acc_cnt.reshape(-1), volume._dd.reshape(-1),
                  volume._dw.reshape(-1), volume.obs_weight, volume.truncation, new_cells)
    if n_new:
        volume._present = np.concatenate([volume._present, new_cells[:n_new]])
    volume._sparse = None


def coarse_point_cloud(volume: TsdfVolume) -> np.ndarray:
    """Centers of the cells whose absolute distance is under half a voxel."""
    return volume.near_surface_centers()


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)


_SLAB = 96


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes at the zero level; cubes with any absent corner are skipped.

    Faces are wound so their normals point toward positive distance (free space).
    """
    from skimage.measure import marching_cubes

    if len(volume) == 0:
        return TriangleMesh()
    ijk = volume.ijk
    lo = ijk.min(axis=0)
    hi = ijk.max(axis=0)
    verts_all, tris_all = [], []
    n_verts = 0
    for x0 in range(lo[0], hi[0], _SLAB):
        x1 = min(x0 + _SLAB, hi[0])
        sel = (ijk[:, 0] >= x0) & (ijk[:, 0] <= x1)
        if not np.any(sel):
            continue
        shape = (x1 - x0 + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1)
        if min(shape) < 2:
            continue
        rel = ijk[sel] - np.array([x0, lo[1], lo[2]])
        grid = np.full(shape, volume.truncation, dtype=np.float64)
        present = np.zeros(shape, dtype=bool)
        grid[rel[:, 0], rel[:, 1], rel[:, 2]] = volume.d[sel]
        present[rel[:, 0], rel[:, 1], rel[:, 2]] = True
        full = np.ones(tuple(s - 1 for s in shape), dtype=bool)
        for ox in (0, 1):
            for oy in (0, 1):
                for oz in (0, 1):
                    full &= present[ox:shape[0] - 1 + ox, oy:shape[1] - 1 + oy, oz:shape[2] - 1 + oz]
        if not np.any(full):
            continue
        try:
            verts, faces, _, _ = marching_cubes(grid, level=0.0, gradient_direction="descent")
        except (ValueError, RuntimeError):
            continue
        if len(faces) == 0:
            continue
        cube = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
        cube = np.clip(cube, 0, np.array(full.shape) - 1)
        keep = full[cube[:, 0], cube[:, 1], cube[:, 2]]
        faces = faces[keep]
        if len(faces) == 0:
            continue
        used, remap = np.unique(faces.reshape(-1), return_inverse=True)
        world = (verts[used] + np.array([x0, lo[1], lo[2]]) + 0.5) * volume.voxel_size
        verts_all.append(world)
        tris_all.append(remap.reshape(-1, 3) + n_verts)
        n_verts += len(world)
    if not verts_all:
        return TriangleMesh()
    return TriangleMesh(np.concatenate(verts_all), np.concatenate(tris_all))


@dataclass(eq=False)
class _SubmapRecord:
    volume: TsdfVolume
    odom_pose: RigidPose
    pose_history: dict


class GlobalMapState:
    """World-frame TSDF assembled from submap volumes at their optimised poses.

    The global field is kept as an accumulated weighted distance ``sum(w*d)`` and weight
    ``sum(w)`` per cell so that submaps can be removed and re-added exactly.
    """

    def __init__(self, voxel_size: float = 0.1, truncation: float = 0.3, interpolation: str = "trilinear"):
        if interpolation not in ("trilinear", "nearest"):
            raise ValueError("interpolation must be 'trilinear' or 'nearest'")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.interpolation = interpolation
        self.keys = np.zeros(0, dtype=np.int64)
        self.num = np.zeros(0)
        self.weight = np.zeros(0)
        self.submaps: dict = {}
        self.integrated_pose_index: dict = {}
        self._cache: dict = {}

    def add_submap(self, sid, volume: TsdfVolume, odom_pose: RigidPose, pose_history: dict) -> None:
        """Register a submap's data; ``pose_history`` is held by reference and may keep growing."""
        self.submaps[sid] = _SubmapRecord(volume, odom_pose, pose_history)

    @property
    def volume(self) -> TsdfVolume:
        d = np.clip(self.num / self.weight, -self.truncation, self.truncation) if len(self.keys) else np.zeros(0)
        return TsdfVolume.from_cells(unpack_keys(self.keys), d, self.weight.copy(), self.voxel_size, self.truncation)

    def _accumulate(self, keys, psi, w, sign: float) -> None:
        if len(keys) == 0:
            return
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = (pos < len(self.keys)) & (self.keys[pos_c] == keys) if len(self.keys) else np.zeros(len(keys), bool)
        idx = pos_c[hit]
        self.num[idx] += sign * psi[hit]
        self.weight[idx] += sign * w[hit]
        miss = ~hit
        if np.any(miss):
            if sign < 0:
                raise RuntimeError("removing a contribution from cells that were never added")
            p = pos[miss]
            self.keys = np.insert(self.keys, p, keys[miss])
            self.num = np.insert(self.num, p, psi[miss])
            self.weight = np.insert(self.weight, p, w[miss])
        if sign < 0:
            keep = self.weight > _RETRACT_EPS
            if not np.all(keep):
                self.keys, self.num, self.weight = self.keys[keep], self.num[keep], self.weight[keep]

    def add(self, sid, q) -> None:
        keys, psi, w = submap_contribution(self, sid, q)
        self._accumulate(keys, psi, w, +1.0)
        self._cache[sid] = (q, keys, psi, w)
        self.integrated_pose_index[sid] = q

    def remove(self, sid) -> None:
        q = self.integrated_pose_index.pop(sid)
        cached = self._cache.pop(sid, None)
        if cached is not None and cached[0] == q:
            _, keys, psi, w = cached
        else:
            keys, psi, w = submap_contribution(self, sid, q)
        self._accumulate(keys, psi, w, -1.0)


def _world_to_local(g: GlobalMapState, rec: _SubmapRecord, q) -> RigidPose:
    try:
        world_pose = rec.pose_history[q]
    except KeyError:
        raise ValueError(f"submap has no pose for optimisation index {q}") from None
    # theta = oP * wP_q^-1 takes world points into the odometry frame; the volume is stored
    # relative to its anchor at oP, hence the extra oP^-1
    theta = compose(rec.odom_pose, inverse(world_pose))
    return compose(inverse(rec.odom_pose), theta)


def submap_contribution(g: GlobalMapState, sid, q):
    """Weighted distance ``psi = w * d`` and weight of submap ``sid`` placed with pose index ``q``.

    Returns sorted packed global keys and the per-cell ``psi`` and ``w``. A global voxel
    receives a contribution when the submap cell containing its transformed center exists.
    """
    rec = g.submaps[sid]
    to_local = _world_to_local(g, rec, q)
    vol = rec.volume
    if len(vol) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    to_world = inverse(to_local)
    vs_l, vs_g = vol.voxel_size, g.voxel_size

    world_centers = to_world.apply(vol.centers())
    base = np.floor(world_centers / vs_g - 0.5).astype(np.int64)
    reach = int(np.ceil(np.sqrt(3.0) / 2.0 * vs_l / vs_g - 1e-12))
    offs = np.arange(1 - reach, reach + 1)
    grid = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3)
    cand = np.unique(pack_keys((base[:, None, :] + grid[None, :, :]).reshape(-1, 3)))
    x = (unpack_keys(cand) + 0.5) * vs_g
    xl = to_local.apply(x)

    home = vol.lookup(pack_keys(np.floor(xl / vs_l).astype(np.int64)))
    inside = home >= 0
    cand, xl, home = cand[inside], xl[inside], home[inside]
    if g.interpolation == "nearest":
        return cand, vol.w[home] * vol.d[home], vol.w[home].copy()

    u = xl / vs_l - 0.5
    lo = np.floor(u).astype(np.int64)
    frac = u - lo
    w_sum = np.zeros(len(cand))
    d_acc = np.zeros(len(cand))
    beta_sum = np.zeros(len(cand))
    for ox in (0, 1):
        bx = frac[:, 0] if ox else 1.0 - frac[:, 0]
        for oy in (0, 1):
            by = frac[:, 1] if oy else 1.0 - frac[:, 1]
            for oz in (0, 1):
                bz = frac[:, 2] if oz else 1.0 - frac[:, 2]
                idx = vol.lookup(pack_keys(lo + np.array([ox, oy, oz])))
                ok = idx >= 0
                beta = np.where(ok, bx * by * bz, 0.0)
                safe = np.where(ok, idx, 0)
                w_sum += beta * vol.w[safe]
                d_acc += beta * vol.d[safe]
                beta_sum += beta
    d = d_acc / beta_sum
    return cand, w_sum * d, w_sum


def global_update(g: GlobalMapState, new_submap=None, moved=(), n=None) -> None:
    """Fold optimisation ``n`` into the global field.

    Each moved submap is retracted at the pose it was integrated with and re-added at
    pose ``n``; ``new_submap`` (an id, a list of ids, or None) is added at pose ``n``.
    """
    if n is None:
        raise ValueError("optimisation index n is required")
    new_ids = [] if new_submap is None else (list(new_submap) if isinstance(new_submap, (list, tuple, set)) else [new_submap])
    for k in moved:
        if k not in g.integrated_pose_index:
            raise ValueError(f"moved submap {k} was never integrated")
    for k in new_ids:
        if k in g.integrated_pose_index:
            raise ValueError(f"submap {k} is already integrated")
    for k in sorted(moved):
        g.remove(k)
        g.add(k, n)
    for k in new_ids:
        g.add(k, n)


def rebuild_global(g: GlobalMapState) -> GlobalMapState:
    """Fresh global map summing every integrated submap at its recorded pose index."""
    fresh = GlobalMapState(g.voxel_size, g.truncation, g.interpolation)
    for sid, rec in g.submaps.items():
        fresh.add_submap(sid, rec.volume, rec.odom_pose, rec.pose_history)
    for sid in sorted(g.integrated_pose_index):
        fresh.add(sid, g.integrated_pose_index[sid])
    return fresh


def reprocess_decision(old_pose: RigidPose, new_pose: RigidPose, trans_thresh: float = 0.01,
                       rot_thresh_deg: float = 0.1) -> bool:
    """True when the submap moved by more than either threshold (strictly)."""
    rel = compose(inverse(old_pose), new_pose)
    # guard the boundary against last-ulp noise so "exactly at threshold" stays False
    moved_t = np.linalg.norm(rel.translation) > trans_thresh * (1 + 1e-9)
    moved_r = np.rad2deg(rotation_angle(rel.rotation)) > rot_thresh_deg * (1 + 1e-9)
    return bool(moved_t or moved_r)
