"""Trajectory and map error metrics against ground truth."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .core import RigidPose, compose, inverse
from .tsdf import TriangleMesh

__all__ = [
    "TrajectoryErrorReport",
    "MapErrorReport",
    "associate",
    "umeyama_align",
    "ape",
    "point_triangle_distance",
    "cloud_to_mesh_distance",
    "write_report_json",
    "write_series_csv",
]

ASSOC_MAX_DT = 0.05


@dataclass(eq=False)
class TrajectoryErrorReport:
    timestamps: np.ndarray
    ape: np.ndarray
    ape_rms: float
    ape_mean: float
    ape_std: float
    ape_rms_align: float
    ape_std_align: float
    e_x: np.ndarray
    e_y: np.ndarray
    e_yaw: np.ndarray
    matched: int
    unmatched: int
    pre_align: str = "start-frame"
    std_convention: str = "population"

    def summary(self) -> dict:
        return {
            "ape_rms": self.ape_rms,
            "ape_mean": self.ape_mean,
            "ape_std": self.ape_std,
            "ape_rms_align": self.ape_rms_align,
            "ape_std_align": self.ape_std_align,
            "ape_max": float(self.ape.max()),
            "final_yaw_error_deg": float(self.e_yaw[-1]),
            "max_abs_yaw_error_deg": float(np.max(np.abs(self.e_yaw))),
            "matched": self.matched,
            "unmatched": self.unmatched,
            "pre_align": self.pre_align,
            "std_convention": self.std_convention,
        }


@dataclass(eq=False)
class MapErrorReport:
    e_map: float
    e_std_map: float
    samples: int
    std_convention: str = "population"

    def summary(self) -> dict:
        return asdict(self)


def associate(t_est, t_ref, max_dt: float = ASSOC_MAX_DT):
    """Nearest-timestamp pairs ``(i_est, i_ref)`` within ``max_dt``; unmatched poses are dropped."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if len(t_est) == 0 or len(t_ref) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.argsort(t_ref, kind="stable")
    ts = t_ref[order]
    pos = np.clip(np.searchsorted(ts, t_est), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(t_est), np.int64)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(ts[left] - t_est) <= np.abs(ts[pos] - t_est), left, pos)
    ok = np.abs(ts[pick] - t_est) <= max_dt
    return np.nonzero(ok)[0], order[pick[ok]]


def umeyama_align(est, ref, with_scale: bool = False):
    """Least-squares ``(T, s)`` minimising ``sum ||s * R est_i + t - ref_i||^2``.

    ``est`` and ``ref`` are (N, 3) corresponding positions. Returns a RigidPose and the
    scale (1.0 unless ``with_scale``).
    """
    x = np.asarray(est, dtype=float).reshape(-1, 3)
    y = np.asarray(ref, dtype=float).reshape(-1, 3)
    if len(x) != len(y):
        raise ValueError("position sets differ in length")
    if len(x) < 3:
        raise ValueError("need at least 3 associated positions")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sx = np.linalg.svd(xc, compute_uv=False)
    if sx[1] <= 1e-9 * max(sx[0], 1e-300):
        raise ValueError("degenerate configuration")
    cov = yc.T @ xc / len(x)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if with_scale:
        var_x = np.mean(np.sum(xc**2, axis=1))
        scale = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - scale * R @ mx
    return RigidPose(R, t), scale


def _yaw_deg(R: np.ndarray) -> np.ndarray:
    # Z-Y-X Euler yaw of each rotation
    return np.degrees(np.arctan2(R[..., 1, 0], R[..., 0, 0]))


def _rms_std(a: np.ndarray):
    return float(np.sqrt(np.mean(a**2))), float(np.mean(a)), float(np.std(a))


def ape(t_est, est, t_ref, ref, pre_align: str = "start-frame") -> TrajectoryErrorReport:
    """Absolute position error of ``est`` against ``ref`` after a common-origin alignment.

    ``start-frame`` maps the first associated estimate pose onto its reference pose;
    ``umeyama`` uses the least-squares rigid fit of all associated positions. The
    ``*_align`` fields always use the Umeyama fit.
    """
    if pre_align not in ("start-frame", "umeyama"):
        raise ValueError("pre_align must be 'start-frame' or 'umeyama'")
    i_est, i_ref = associate(t_est, t_ref)
    if len(i_est) == 0:
        raise ValueError(f"no associated poses (0 of {len(t_est)} matched within {ASSOC_MAX_DT} s)")
    E = [est[i] for i in i_est]
    G = [ref[j] for j in i_ref]
    pe = np.array([p.translation for p in E])
    pg = np.array([p.translation for p in G])

    try:
        T_u, _ = umeyama_align(pe, pg)
    except ValueError:
        T_u = None
    if pre_align == "start-frame":
        A = compose(G[0], inverse(E[0]))
    else:
        if T_u is None:
            raise ValueError("degenerate configuration")
        A = T_u
    aligned = [compose(A, p) for p in E]
    pa = np.array([p.translation for p in aligned])
    diff = pa - pg
    err = np.linalg.norm(diff, axis=1)
    rel = np.array([inverse(g).rotation @ a.rotation for g, a in zip(G, aligned)])
    rms, mean, std = _rms_std(err)
    if T_u is not None:
        err_u = np.linalg.norm(T_u.apply(pe) - pg, axis=1)
        rms_u, _, std_u = _rms_std(err_u)
    else:
        rms_u, std_u = rms, std
    return TrajectoryErrorReport(
        timestamps=np.asarray(t_est, dtype=float)[i_est],
        ape=err,
        ape_rms=rms,
        ape_mean=mean,
        ape_std=std,
        ape_rms_align=rms_u,
        ape_std_align=std_u,
        e_x=diff[:, 0],
        e_y=diff[:, 1],
        e_yaw=_yaw_deg(rel),
        matched=len(i_est),
        unmatched=len(t_est) - len(i_est),
        pre_align=pre_align,
    )


@numba.njit(cache=True)
def _edges_sq(p, a, b, c):
    best = np.inf
    for s, e in ((a, b), (b, c), (c, a)):
        se = e - s
        L = se @ se
        u = 0.0 if L <= 0.0 else min(max(((p - s) @ se) / L, 0.0), 1.0)
        r = p - (s + u * se)
        best = min(best, r @ r)
    return best


@numba.njit(cache=True)
def _closest_sq(p, a, b, c):
    # closest point on triangle abc to p (Ericson, Real-Time Collision Detection 5.1.5)
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    scale = max(ab @ ab, ac @ ac)
    if n @ n <= 1e-24 * scale * scale:
        # zero-area triangle (collapsed pole or repeated vertex): nearest edge point
        return _edges_sq(p, a, b, c)
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        q = a
    else:
        bp = p - b
        d3 = ab @ bp
        d4 = ac @ bp
        vc = d1 * d4 - d3 * d2
        cp = p - c
        d5 = ab @ cp
        d6 = ac @ cp
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            q = b
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            q = a + (d1 / (d1 - d3)) * ab
        elif d6 >= 0.0 and d5 <= d6:
            q = c
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            q = a + (d2 / (d2 - d6)) * ac
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            q = b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b)
        else:
            denom = va + vb + vc
            v = vb / denom
            w = vc / denom
            q = a + v * ab + w * ac
    r = p - q
    return r @ r


@numba.njit(cache=True)
def _min_dist(points, A, B, C, ptr, idx, brute):
    out = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        best = np.inf
        for k in range(ptr[i], ptr[i + 1]):
            t = idx[k]
            best = min(best, _closest_sq(points[i], A[t], B[t], C[t]))
        for t in brute:
            best = min(best, _closest_sq(points[i], A[t], B[t], C[t]))
        out[i] = np.sqrt(best)
    return out


def point_triangle_distance(points, mesh: TriangleMesh) -> np.ndarray:
    """Exact unsigned distance from each point to the nearest triangle of ``mesh``."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    if len(mesh.triangles) == 0:
        raise ValueError("reference mesh has no triangles")
    if len(pts) == 0:
        return np.zeros(0)
    V = mesh.vertices
    A = np.ascontiguousarray(V[mesh.triangles[:, 0]])
    B = np.ascontiguousarray(V[mesh.triangles[:, 1]])
    C = np.ascontiguousarray(V[mesh.triangles[:, 2]])
    cent = (A + B + C) / 3.0
    radius = np.max(np.stack([np.linalg.norm(X - cent, axis=1) for X in (A, B, C)]), axis=0)
    # a handful of very large triangles would blow up every search radius; test them always
    big = radius > max(4.0 * np.median(radius), 1e-12)
    small = np.nonzero(~big)[0]
    brute = np.nonzero(big)[0].astype(np.int64)
    if len(small):
        tree = cKDTree(cent[small])
        k = min(8, len(small))
        _, near = tree.query(pts, k=k)
        near = small[np.asarray(near).reshape(len(pts), k)]
        ptr0 = np.arange(len(pts) + 1, dtype=np.int64) * k
        ub = _min_dist(pts, A, B, C, ptr0, near.reshape(-1).astype(np.int64), brute)
        rmax = float(radius[small].max())
        cand = tree.query_ball_point(pts, ub + rmax + 1e-12)
        lengths = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
        ptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        flat = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand]) if ptr[-1] else np.zeros(0, np.int64)
        idx = small[flat].astype(np.int64)
    else:
        ptr = np.zeros(len(pts) + 1, dtype=np.int64)
        idx = np.zeros(0, dtype=np.int64)
    return _min_dist(pts, A, B, C, ptr, idx, brute)


def _icp_refine(pts: np.ndarray, ref: TriangleMesh, iters: int = 20) -> RigidPose:
    tree = cKDTree(ref.vertices)
    T = RigidPose.identity()
    for _ in range(iters):
        moved = T.apply(pts)
        _, nn = tree.query(moved)
        step, _ = umeyama_align(moved, ref.vertices[nn])
        T = compose(step, T)
        if np.linalg.norm(step.translation) < 1e-6:
            break
    return T


def cloud_to_mesh_distance(sample, ref: TriangleMesh, alignment: RigidPose | None = None,
                           refine_icp: bool = False) -> MapErrorReport:
    """Mean and population std of unsigned distances from a map to a reference mesh.

    ``sample`` is a TriangleMesh (its vertices are used) or an (N, 3) cloud. ``alignment``
    is applied to the samples first; ``refine_icp`` adds a point-to-point ICP polish.
    """
    pts = sample.vertices if isinstance(sample, TriangleMesh) else np.asarray(sample, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("map has no points")
    if len(ref.triangles) == 0:
        raise ValueError("reference mesh has no triangles")
    if alignment is not None:
        pts = alignment.apply(pts)
    if refine_icp:
        pts = _icp_refine(pts, ref).apply(pts)
    d = point_triangle_distance(pts, ref)
    return MapErrorReport(float(d.mean()), float(d.std()), len(d))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_report_json(path, trajectory: TrajectoryErrorReport | None, map_report: MapErrorReport | None,
                      extra: dict | None = None) -> None:
    doc = {
        "trajectory": None if trajectory is None else trajectory.summary(),
        "map": None if map_report is None else map_report.summary(),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_series_csv(path, report: TrajectoryErrorReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "e_x", "e_y", "e_yaw", "ape"])
        for row in zip(report.timestamps, report.e_x, report.e_y, report.e_yaw, report.ape):
            w.writerow([f"{v:.9g}" for v in row])
