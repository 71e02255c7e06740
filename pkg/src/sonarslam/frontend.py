"""Frame-rate stage: registers sonar frames into rigid submaps with their own TSDF."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .core import RigidPose, SonarFrame, compose, inverse
from .features import OrientedCloud, extract_oriented_surface_points, occupancy_overlap
from .posegraph import FactorGraph, information_from_registration, information_from_sigmas, optimize
from .registration import InsufficientFeatures, RegistrationResult, register
from .tsdf import TsdfVolume, coarse_point_cloud, integrate_frame

__all__ = [
    "SubMap",
    "FrameRegistered",
    "SubmapClosed",
    "Frontend",
    "predict_frame_pose",
    "submap_complete",
]

log = logging.getLogger(__name__)


def predict_frame_pose(prev, odom: RigidPose) -> RigidPose:
    """Carry the last estimate forward by the odometry increment.

    ``prev`` is ``(estimate_prev, odom_prev)`` or None for the very first frame, in which
    case the odometry pose is returned unchanged.
    """
    if prev is None:
        return odom
    est_prev, odom_prev = prev
    return compose(compose(est_prev, inverse(odom_prev)), odom)


@dataclass(eq=False)
class SubMap:
    """A run of consecutive frames fused into one TSDF anchored at its first frame.

    ``frames`` holds ``(frame, pose)`` pairs with poses in the frontend frame; ``tsdf`` is
    expressed in the first frame's sensor frame.
    """

    id: int
    first_frame_index: int
    odom_pose: RigidPose
    tsdf: TsdfVolume
    frames: list = field(default_factory=list)
    pose_history: dict = field(default_factory=dict)
    closed: bool = False
    _coarse: np.ndarray | None = field(default=None, repr=False)
    _coarse_version: int = field(default=-1, repr=False)
    _features: dict = field(default_factory=dict, repr=False)

    @property
    def anchor_pose(self) -> RigidPose:
        """Frontend-frame pose of the first frame."""
        return self.frames[0][1]

    def local_poses(self) -> list:
        """Pose of every frame relative to the first frame."""
        inv0 = inverse(self.anchor_pose)
        return [compose(inv0, p) for _, p in self.frames]

    def coarse_cloud(self) -> np.ndarray:
        version = len(self.frames)
        if self._coarse is None or self._coarse_version != version:
            self._coarse = coarse_point_cloud(self.tsdf)
            self._coarse_version = version
            self._features = {}
        return self._coarse

    def features(self, r: float) -> OrientedCloud:
        """Oriented surface points of the coarse cloud in the submap frame."""
        cloud = self.coarse_cloud()
        if r not in self._features:
            self._features[r] = extract_oriented_surface_points(cloud, r)
        return self._features[r]


@dataclass(frozen=True, eq=False)
class FrameRegistered:
    index: int
    submap_id: int
    pose: RigidPose
    sequential: RegistrationResult | None = None
    to_submap: RegistrationResult | None = None
    odometry_fallback: bool = False


@dataclass(frozen=True, eq=False)
class SubmapClosed:
    frame: FrameRegistered | None
    submap: SubMap


def submap_complete(s: SubMap, latest_cloud_f, first_cloud_f, first_count: int, cfg: PipelineConfig) -> bool:
    """Close when the newest frame has drifted off the first one and the map out-grew it.

    Both clouds are in the frontend frame; ``first_count`` is the first frame's raw
    point count.
    """
    if len(latest_cloud_f) == 0:
        return False
    try:
        overlap = occupancy_overlap(latest_cloud_f, first_cloud_f, cfg.r)
    except ValueError:
        return False
    return overlap < cfg.overlap_thresh and len(s.coarse_cloud()) > first_count


class Frontend:
    """Sequential consumer of sonar frames; emits closed submaps."""

    def __init__(self, cfg: PipelineConfig | None = None):
        self.cfg = cfg or PipelineConfig()
        self.current: SubMap | None = None
        self.graph: FactorGraph | None = None
        self.next_submap_id = 0
        self._last = None  # (index, estimate, odom, features)
        self._first_features: OrientedCloud | None = None
        self._first_cloud_f: np.ndarray | None = None
        self._first_count = 0
        self._target: OrientedCloud | None = None
        self._target_version = 0
        self._prior_info = information_from_sigmas(self.cfg.prior_sigma_trans, np.deg2rad(self.cfg.prior_sigma_rot_deg))
        self._odom_info = information_from_sigmas(self.cfg.odom_sigma_trans, np.deg2rad(self.cfg.odom_sigma_rot_deg))

    def _reg_info(self, res: RegistrationResult) -> np.ndarray:
        return information_from_registration(res.final_error, self.cfg.reg_min_sigma_trans, self.cfg.reg_sigma_rot_deg)

    def _try_register(self, source, target, prior):
        try:
            res = register(source, target, prior, self.cfg.r, self.cfg.registration)
        except InsufficientFeatures:
            return None
        return res

    def _open_submap(self, frame: SonarFrame, pose: RigidPose, feats: OrientedCloud) -> FrameRegistered:
        cfg = self.cfg
        s = SubMap(
            id=self.next_submap_id,
            first_frame_index=frame.index,
            odom_pose=frame.odom_pose,
            tsdf=TsdfVolume(cfg.voxel_size, cfg.truncation),
        )
        self.next_submap_id += 1
        s.frames.append((frame, pose))
        integrate_frame(s.tsdf, np.zeros(3), frame.cloud)
        self.graph = FactorGraph()
        self.graph.add_node(frame.index, pose)
        self.graph.add_prior(frame.index, pose, self._prior_info)
        self.current = s
        self._first_features = feats
        self._first_cloud_f = pose.apply(frame.cloud)
        self._first_count = len(frame.cloud)
        self._target = None
        self._target_version = 0
        log.debug("opened submap %d at frame %d", s.id, frame.index)
        return FrameRegistered(frame.index, s.id, pose)

    def process_frame(self, frame: SonarFrame):
        """Register ``frame``, fuse it and report whether its submap just closed."""
        if self._last is not None and frame.index <= self._last[0]:
            raise ValueError(f"frame {frame.index} arrived after frame {self._last[0]}")
        cfg = self.cfg
        prev = None if self._last is None else (self._last[1], self._last[2])
        pred = predict_frame_pose(prev, frame.odom_pose)
        feats = extract_oriented_surface_points(frame.cloud, cfg.r)

        if self.current is None:
            event = self._open_submap(frame, pred, feats)
            self._last = (frame.index, pred, frame.odom_pose, feats)
            return event

        s = self.current
        anchor_id = s.first_frame_index
        anchor = s.anchor_pose
        prev_id, prev_pose, _, prev_feats = self._last

        seq = self._try_register(feats, prev_feats, compose(inverse(prev_pose), pred))
        if self._target is None or len(s.frames) - self._target_version >= cfg.submap_target_refresh:
            if len(s.coarse_cloud()) > self._first_count:
                self._target = s.features(cfg.r)
            else:
                self._target = self._first_features
            self._target_version = len(s.frames)
        target = self._target
        nonseq = self._try_register(feats, target, compose(inverse(anchor), pred))
        seq_ok = seq is not None and seq.converged
        nonseq_ok = nonseq is not None and nonseq.converged

        g = self.graph
        if nonseq_ok:
            init = compose(anchor, nonseq.transform)
        elif seq_ok:
            init = compose(prev_pose, seq.transform)
        else:
            init = pred
        g.add_node(frame.index, init)
        if seq_ok:
            g.add_between(prev_id, frame.index, seq.transform, self._reg_info(seq))
        if nonseq_ok:
            g.add_between(anchor_id, frame.index, nonseq.transform, self._reg_info(nonseq))
        fallback = not (seq_ok or nonseq_ok)
        if fallback:
            rel = compose(inverse(self._last[2]), frame.odom_pose)
            g.add_between(prev_id, frame.index, rel, self._odom_info)
            log.debug("frame %d: both registrations failed, using odometry", frame.index)
        else:
            result = optimize(g, cfg.solver)
            for node, pose in result.poses.items():
                g.set_pose(node, pose)
            s.frames = [(f, g.nodes[f.index]) for f, _ in s.frames]
        pose = g.nodes[frame.index]
        s.frames.append((frame, pose))

        local = compose(inverse(s.anchor_pose), pose)
        integrate_frame(s.tsdf, local.translation, local.apply(frame.cloud))
        self._last = (frame.index, pose, frame.odom_pose, feats)
        event = FrameRegistered(frame.index, s.id, pose, seq, nonseq, fallback)

        if len(s.frames) >= cfg.max_submap_frames or submap_complete(
            s, pose.apply(frame.cloud), self._first_cloud_f, self._first_count, cfg
        ):
            return SubmapClosed(event, self._close())
        return event

    def _close(self) -> SubMap:
        s = self.current
        s.closed = True
        s.tsdf.compact()
        s.coarse_cloud()
        self.current = None
        self.graph = None
        log.debug("closed submap %d with %d frames", s.id, len(s.frames))
        return s

    def finish(self):
        """Close the open submap at end of stream (None if nothing is open)."""
        if self.current is None:
            return None
        return SubmapClosed(None, self._close())
