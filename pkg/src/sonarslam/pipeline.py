"""End-to-end runner wiring frontend, backend and the global map, sync or threaded."""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .backend import Backend, frame_trajectory
from .config import PipelineConfig
from .frontend import Frontend, SubmapClosed
from .tsdf import GlobalMapState, global_update, reprocess_decision

__all__ = ["GlobalUpdater", "RunResult", "run_slam", "warm_up"]

log = logging.getLogger(__name__)

_QUEUE_SIZE = 8


class GlobalUpdater:
    """Keeps the global TSDF in step with the backend's pose history.

    In threaded mode requests are coalesced: only the newest optimisation index is
    applied when the worker falls behind.
    """

    def __init__(self, cfg: PipelineConfig, threaded: bool = False):
        self.cfg = cfg
        self.map = GlobalMapState(cfg.global_voxel_size, cfg.truncation, cfg.interpolation)
        self.timings: list[float] = []
        self.threaded = threaded
        self._pending = None
        self._cv = threading.Condition()
        self._stop = False
        self._error: BaseException | None = None
        self._thread = None
        if threaded:
            self._thread = threading.Thread(target=self._worker, name="global-tsdf", daemon=True)
            self._thread.start()

    def _apply(self, submaps, n: int) -> None:
        t0 = time.perf_counter()
        g = self.map
        for s in submaps:
            if s.id not in g.submaps:
                g.add_submap(s.id, s.tsdf, s.odom_pose, s.pose_history)
        new = [s.id for s in submaps if s.id not in g.integrated_pose_index]
        moved = [
            sid for sid in sorted(g.integrated_pose_index)
            if reprocess_decision(g.submaps[sid].pose_history[g.integrated_pose_index[sid]],
                                  g.submaps[sid].pose_history[n], self.cfg.reprocess_trans,
                                  self.cfg.reprocess_rot_deg)
        ]
        global_update(g, new_submap=new, moved=moved, n=n)
        self.timings.append(time.perf_counter() - t0)

    def submit(self, submaps, n: int) -> None:
        snapshot = list(submaps)
        if not self.threaded:
            self._apply(snapshot, n)
            return
        with self._cv:
            if self._error is not None:
                raise RuntimeError("global map worker failed") from self._error
            self._pending = (snapshot, n)
            self._cv.notify()

    def _worker(self) -> None:
        while True:
            with self._cv:
                while self._pending is None and not self._stop:
                    self._cv.wait()
                if self._pending is None and self._stop:
                    return
                job, self._pending = self._pending, None
            try:
                self._apply(*job)
            except BaseException as exc:  # surfaced to the submitting thread
                with self._cv:
                    self._error = exc
                return

    def close(self) -> None:
        if self._thread is None:
            return
        with self._cv:
            self._stop = True
            self._cv.notify()
        self._thread.join()
        self._thread = None
        if self._error is not None:
            raise RuntimeError("global map worker failed") from self._error


@dataclass(eq=False)
class RunResult:
    timestamps: np.ndarray
    poses: list
    submaps: list
    backend: Backend
    global_map: GlobalMapState
    timings: dict = field(default_factory=dict)
    config: PipelineConfig | None = None


def warm_up(cfg: PipelineConfig | None = None) -> None:
    """Compile the jitted kernels on a toy frame so timings exclude compilation."""
    from .core import RigidPose, SonarFrame

    cfg = cfg or PipelineConfig()
    rng = np.random.default_rng(0)
    pts = np.column_stack([np.full(400, 3.0), rng.uniform(-1, 1, 400), rng.uniform(-1, 1, 400)])
    fe = Frontend(cfg)
    for i in range(2):
        fe.process_frame(SonarFrame(i, i / 6.0, pts, RigidPose.identity()))


def run_slam(frames, cfg: PipelineConfig | None = None, sync: bool = True, on_report=None) -> RunResult:
    """Run the full pipeline over an iterable of frames.

    With ``sync`` every stage runs in the caller's thread in a fixed order; otherwise the
    backend and the global map each get a worker thread joined by ordered queues.
    """
    cfg = cfg or PipelineConfig()
    fe = Frontend(cfg)
    be = Backend(cfg)
    updater = GlobalUpdater(cfg, threaded=not sync)
    t_front: list[float] = []
    t_back: list[float] = []

    def handle(submap):
        t0 = time.perf_counter()
        report = be.process_submap(submap)
        t_back.append(time.perf_counter() - t0)
        updater.submit(be.submaps, report.n)
        if on_report is not None:
            on_report(report)

    submap_q: queue.Queue | None = None
    worker = None
    failure: list[BaseException] = []
    if not sync:
        submap_q = queue.Queue(maxsize=_QUEUE_SIZE)

        def consume():
            while True:
                item = submap_q.get()
                if item is None:
                    return
                try:
                    handle(item)
                except BaseException as exc:
                    failure.append(exc)
                    return

        worker = threading.Thread(target=consume, name="backend", daemon=True)
        worker.start()

    def emit(submap):
        if sync:
            handle(submap)
        else:
            if failure:
                raise RuntimeError("backend failed") from failure[0]
            submap_q.put(submap)

    try:
        for frame in frames:
            t0 = time.perf_counter()
            event = fe.process_frame(frame)
            t_front.append(time.perf_counter() - t0)
            if isinstance(event, SubmapClosed):
                emit(event.submap)
        last = fe.finish()
        if last is not None:
            emit(last.submap)
    finally:
        if worker is not None:
            submap_q.put(None)
            worker.join()
        updater.close()
    if failure:
        raise RuntimeError("backend failed") from failure[0]
    if not sync and be.optimization_count:
        # the coalescing worker may have skipped the final request's moved set
        updater.threaded = False
        updater.submit(be.submaps, be.optimization_count)

    times, poses = frame_trajectory(be.submaps)
    timings = {"frontend": t_front, "backend": t_back, "global_tsdf": updater.timings}
    return RunResult(times, poses, be.submaps, be, updater.map, timings, cfg)
