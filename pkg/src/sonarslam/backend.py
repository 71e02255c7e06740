"""Submap-rate stage: sequential submap registration, loop closures and the global pose graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .core import RigidPose, compose, inverse
from .features import occupancy_overlap
from .frontend import SubMap, predict_frame_pose
from .posegraph import FactorGraph, information_from_registration, information_from_sigmas, optimize
from .registration import InsufficientFeatures, RegistrationResult, register
from .tsdf import GlobalMapState, global_update, reprocess_decision

__all__ = [
    "LoopClosure",
    "BackendReport",
    "Backend",
    "predict_submap_pose",
    "refine_submap_pose",
    "detect_loop_closures",
    "frame_trajectory",
    "submap_relative_motion",
]

log = logging.getLogger(__name__)

# the submap-level prediction has exactly the frame-level form
predict_submap_pose = predict_frame_pose


def refine_submap_pose(pred: RigidPose, reg: RegistrationResult | None):
    """Apply a world-frame registration correction to the predicted pose.

    Returns ``(pose, registered)``; an unconverged or missing result leaves the
    prediction untouched and flags that only odometry links the submap.
    """
    if reg is None or not reg.converged:
        return pred, False
    return compose(reg.transform, pred), True


def submap_relative_motion(prev: SubMap, s: SubMap) -> RigidPose:
    """Motion from ``prev``'s first frame to ``s``'s first frame.

    The frontend's registered pose of ``prev``'s last frame covers most of the span; only
    the final step to ``s`` comes from raw odometry. Raw odometry across the whole
    submap would carry its full drift into the backend.
    """
    last_frame, _ = prev.frames[-1]
    local_last = prev.local_poses()[-1]
    step = compose(inverse(last_frame.odom_pose), s.odom_pose)
    return compose(local_last, step)


@dataclass(frozen=True, eq=False)
class LoopClosure:
    source: int  # newer submap k
    target: int  # older submap s
    transform: RigidPose  # pose of k expressed in the frame of s
    error: float

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError("a loop closure needs two different submaps")


@dataclass(frozen=True, eq=False)
class BackendReport:
    n: int
    submap_id: int
    poses: dict
    moved: frozenset
    loop_closures: tuple
    registered: bool


class Backend:
    """Sequential consumer of closed submaps.

    ``optimization_count`` equals the number of submaps processed; after every submap the
    graph is optimized and each submap's ``pose_history`` gains an entry for that count.
    """

    def __init__(self, cfg: PipelineConfig | None = None, global_map: GlobalMapState | None = None):
        self.cfg = cfg or PipelineConfig()
        self.submaps: list[SubMap] = []
        self.graph = FactorGraph()
        self.optimization_count = 0
        self.moved_last: frozenset = frozenset()
        self.loop_closures: list[LoopClosure] = []
        self.sequential_errors: list[float] = []
        self.global_map = global_map
        # pose index each submap was last folded into the global map with, assuming every
        # update is applied in order
        self.phi: dict = {}
        c = self.cfg
        self._prior_info = information_from_sigmas(c.prior_sigma_trans, np.deg2rad(c.prior_sigma_rot_deg))
        self._odom_info = information_from_sigmas(c.odom_sigma_trans, np.deg2rad(c.odom_sigma_rot_deg))

    def _reg_info(self, error: float) -> np.ndarray:
        return information_from_registration(error, self.cfg.reg_min_sigma_trans, self.cfg.reg_sigma_rot_deg)

    def current_pose(self, sid: int) -> RigidPose:
        s = self.submaps[sid]
        return s.pose_history[max(s.pose_history)]

    def lc_error_threshold(self) -> float:
        c = self.cfg
        if c.lc_error_thresh > 0:
            return c.lc_error_thresh
        if not self.sequential_errors:
            return c.lc_error_floor
        return max(c.lc_error_floor, c.lc_error_factor * float(np.median(self.sequential_errors)))

    def _register_world(self, s_new: SubMap, pose_new: RigidPose, s_old: SubMap, pose_old: RigidPose):
        """Register the new submap against an old one, both placed in the world frame."""
        r = self.cfg.r
        try:
            return register(
                s_new.features(r).transformed(pose_new),
                s_old.features(r).transformed(pose_old),
                RigidPose.identity(),
                r,
                self.cfg.registration,
            )
        except InsufficientFeatures:
            return None

    def process_submap(self, s: SubMap) -> BackendReport:
        if not s.closed:
            raise ValueError(f"submap {s.id} is still open")
        if s.id != len(self.submaps):
            raise ValueError(f"submap {s.id} arrived out of order (expected {len(self.submaps)})")
        g = self.graph
        k = s.id
        registered = False
        if k == 0:
            pose = predict_submap_pose(None, s.odom_pose)
            g.add_node(k, pose)
            g.add_prior(k, pose, self._prior_info)
            self.submaps.append(s)
        else:
            prev = self.submaps[k - 1]
            prev_pose = self.current_pose(k - 1)
            rel = submap_relative_motion(prev, s)
            # odometry-form prediction with the frontend-corrected relative motion
            pred = predict_submap_pose((prev_pose, RigidPose.identity()), rel)
            reg = self._register_world(s, pred, prev, prev_pose)
            pose, registered = refine_submap_pose(pred, reg)
            self.submaps.append(s)
            g.add_node(k, pose)
            if registered:
                self.sequential_errors.append(reg.final_error)
                g.add_between(k - 1, k, compose(inverse(prev_pose), pose), self._reg_info(reg.final_error))
            else:
                g.add_between(k - 1, k, rel, self._odom_info)
                log.info("submap %d: sequential registration failed, odometry edge only", k)
            closures = detect_loop_closures(self, k, pose)
            for lc in closures:
                g.add_between(lc.target, lc.source, lc.transform, self._reg_info(lc.error))
            self.loop_closures.extend(closures)

        result = optimize(g, self.cfg.solver)
        for node, p in result.poses.items():
            g.set_pose(node, p)
        self.optimization_count += 1
        n = self.optimization_count
        for sm in self.submaps:
            sm.pose_history[n] = g.nodes[sm.id]

        moved = frozenset(
            sid for sid, q in self.phi.items()
            if reprocess_decision(self.submaps[sid].pose_history[q], self.submaps[sid].pose_history[n],
                                  self.cfg.reprocess_trans, self.cfg.reprocess_rot_deg)
        )
        for sid in moved:
            self.phi[sid] = n
        self.phi[k] = n
        self.moved_last = moved
        if self.global_map is not None:
            self.global_map.add_submap(k, s.tsdf, s.odom_pose, s.pose_history)
            global_update(self.global_map, new_submap=k, moved=sorted(moved), n=n)
        new_closures = tuple(lc for lc in self.loop_closures if lc.source == k)
        return BackendReport(n, k, {sm.id: sm.pose_history[n] for sm in self.submaps}, moved, new_closures, registered)


def detect_loop_closures(backend: Backend, k: int, pose_k: RigidPose) -> list:
    """Verified closures between submap ``k`` (at ``pose_k``) and older non-adjacent submaps."""
    cfg = backend.cfg
    if k < 2:
        return []
    s_k = backend.submaps[k]
    cloud_k = pose_k.apply(s_k.coarse_cloud())
    if len(cloud_k) == 0:
        return []
    thresh = backend.lc_error_threshold()
    out = []
    for sid in range(k - 1):
        s_old = backend.submaps[sid]
        pose_old = backend.current_pose(sid)
        cloud_old = pose_old.apply(s_old.coarse_cloud())
        if len(cloud_old) == 0:
            continue
        if cfg.lc_overlap_query == "new":
            overlap = occupancy_overlap(cloud_k, cloud_old, cfg.r)
        else:
            overlap = occupancy_overlap(cloud_old, cloud_k, cfg.r)
        if overlap <= cfg.lc_overlap:
            continue
        reg = backend._register_world(s_k, pose_k, s_old, pose_old)
        if reg is None or not reg.converged or not reg.final_error < thresh:
            log.debug("loop candidate %d-%d rejected", k, sid)
            continue
        refined = compose(reg.transform, pose_k)
        out.append(LoopClosure(k, sid, compose(inverse(pose_old), refined), reg.final_error))
        log.info("loop closure %d -> %d (overlap %.2f, error %.2e)", k, sid, overlap, reg.final_error)
    return out


def frame_trajectory(submaps, n: int | None = None):
    """Per-frame world poses: each submap's world pose applied to its frames' local poses.

    Returns ``(timestamps, poses)`` ordered by frame index. ``n`` selects the pose index
    (default: the latest one recorded for each submap).
    """
    items = []
    for s in submaps:
        hist = s.pose_history
        world = hist[n] if n is not None else hist[max(hist)]
        for (frame, _), local in zip(s.frames, s.local_poses()):
            items.append((frame.index, frame.timestamp, compose(world, local)))
    items.sort(key=lambda x: x[0])
    return np.array([t for _, t, _ in items]), [p for _, _, p in items]
