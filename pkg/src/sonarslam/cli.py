"""Command line entry point: ``sonarslam {simulate,slam,eval,mesh}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, PipelineConfig, format_config, load_config
from .evaluation import ape, cloud_to_mesh_distance, write_report_json, write_series_csv
from .features import unpack_keys
from .io import DatasetError, ensure_dir, load_dataset, read_ply, read_tum, write_ply, write_tum
from .simkit import BUNDLED_SCENARIOS, ScenarioError, bundled_scenario, generate_dataset, load_scenario
from .tsdf import TriangleMesh, TsdfVolume, extract_mesh

__all__ = ["main", "cmd_simulate", "cmd_slam", "run_dataset", "cmd_eval", "cmd_mesh", "save_volume", "load_volume"]

log = logging.getLogger("sonarslam")


def _setup_logging() -> None:
    level = os.environ.get("SLAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def save_volume(path, vol: TsdfVolume) -> None:
    np.savez_compressed(path, ijk=vol.ijk, d=vol.d, w=vol.w, voxel_size=vol.voxel_size, truncation=vol.truncation)


def load_volume(path) -> TsdfVolume:
    try:
        z = np.load(path)
        return TsdfVolume.from_cells(z["ijk"], z["d"], z["w"], float(z["voxel_size"]), float(z["truncation"]))
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: not a saved volume ({exc})") from None


def cmd_simulate(spec: str, out_dir, seed: int | None = None) -> Path:
    if spec in BUNDLED_SCENARIOS:
        scenario = bundled_scenario(spec, seed)
    else:
        scenario = load_scenario(spec)
        if seed is not None:
            scenario = replace(scenario, seed=seed, sensor=replace(scenario.sensor, rng_seed=seed),
                               drift=replace(scenario.drift, rng_seed=seed + 1))
    return generate_dataset(scenario, out_dir)


def _metrics(ds, times, poses, mesh: TriangleMesh):
    traj = ape(times, poses, ds.timestamps, ds.ground_truth)
    map_report = None
    if ds.gt_mesh is not None and len(mesh.vertices):
        map_report = cloud_to_mesh_distance(mesh, ds.gt_mesh)
    return traj, map_report


def cmd_slam(dataset, out_dir, cfg: PipelineConfig | None = None, sync: bool = False, seed: int | None = None) -> dict:
    """Run the pipeline on a dataset directory and write all outputs to ``out_dir``.

    Returns the run log written to ``run_log.json``.
    """
    return run_dataset(dataset, out_dir, cfg, sync, seed)[0]


def run_dataset(dataset, out_dir, cfg: PipelineConfig | None = None, sync: bool = False, seed: int | None = None):
    """:func:`cmd_slam` that also hands back the in-memory :class:`RunResult`."""
    from .pipeline import run_slam, warm_up

    cfg = cfg or PipelineConfig()
    ds = load_dataset(dataset)
    out = ensure_dir(out_dir)
    (out / "config.txt").write_text(format_config(cfg))
    warm_up(cfg)
    t0 = time.perf_counter()
    result = run_slam(ds.frames(), cfg, sync=sync)
    wall = time.perf_counter() - t0

    write_tum(out / "est.tum", result.timestamps, result.poses)
    vol = result.global_map.volume
    save_volume(out / "global_tsdf.npz", vol)
    t_mesh = time.perf_counter()
    mesh = extract_mesh(vol)
    t_mesh = time.perf_counter() - t_mesh
    write_ply(out / "mesh.ply", mesh.vertices, mesh.triangles)

    with open(out / "submaps.txt", "w") as fh:
        fh.write("# id first_frame n_frames x y z qx qy qz qw\n")
        for s in result.submaps:
            p = s.pose_history[max(s.pose_history)]
            vals = [*p.translation, *p.quaternion()]
            fh.write(f"{s.id} {s.first_frame_index} {len(s.frames)} " + " ".join(f"{v:.9g}" for v in vals) + "\n")
        for lc in result.backend.loop_closures:
            fh.write(f"# loop {lc.source} -> {lc.target} error {lc.error:.6g}\n")

    def stats(xs):
        xs = np.asarray(xs) * 1000.0
        return {"count": len(xs), "mean_ms": float(xs.mean()) if len(xs) else 0.0,
                "max_ms": float(xs.max()) if len(xs) else 0.0}

    run_log = {
        "version": __version__,
        "dataset": str(dataset),
        "frames": len(ds),
        "submaps": len(result.submaps),
        "loop_closures": len(result.backend.loop_closures),
        "sync": sync,
        "seed": seed,
        "wall_s": wall,
        "timings": {k: stats(v) for k, v in result.timings.items()} | {"mesh": stats([t_mesh])},
    }
    (out / "run_log.json").write_text(json.dumps(run_log, indent=2, sort_keys=True) + "\n")

    if ds.ground_truth is not None:
        traj, map_report = _metrics(ds, result.timestamps, result.poses, mesh)
        odom = ape(ds.timestamps, ds.odometry, ds.timestamps, ds.ground_truth)
        write_report_json(out / "metrics.json", traj, map_report,
                          {"odometry": odom.summary(), "config": format_config(cfg)})
        write_series_csv(out / "errors.csv", traj)
    log.info("slam finished: %d frames, %d submaps in %.1f s", len(ds), len(result.submaps), wall)
    return run_log, result


def cmd_eval(est, gt, out_dir, mesh=None, gt_mesh=None, align: str = "start-frame", icp: bool = False) -> dict:
    t_est, p_est = read_tum(est)
    t_gt, p_gt = read_tum(gt)
    traj = ape(t_est, p_est, t_gt, p_gt, pre_align=align)
    map_report = None
    if mesh is not None and gt_mesh is not None:
        v, f = read_ply(mesh, with_faces=True)
        gv, gf = read_ply(gt_mesh, with_faces=True)
        map_report = cloud_to_mesh_distance(v, TriangleMesh(gv, gf), refine_icp=icp)
    out = ensure_dir(out_dir)
    write_report_json(out / "metrics.json", traj, map_report, {"align": align, "icp": icp})
    write_series_csv(out / "errors.csv", traj)
    return {"trajectory": traj.summary(), "map": None if map_report is None else map_report.summary()}


def cmd_mesh(volume, out_path) -> TriangleMesh:
    mesh = extract_mesh(load_volume(volume))
    write_ply(out_path, mesh.vertices, mesh.triangles)
    return mesh


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sonarslam", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("spec", help=f"scenario file or bundled name ({', '.join(BUNDLED_SCENARIOS)})")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("slam", help="run the mapping pipeline on a dataset")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int, help="recorded in the run log; the pipeline itself draws no random numbers")
    s.add_argument("--sync", action="store_true", help="run all stages sequentially (reproducible)")

    s = sub.add_parser("eval", help="score a trajectory (and mesh) against ground truth")
    s.add_argument("est")
    s.add_argument("gt")
    s.add_argument("--mesh")
    s.add_argument("--gt-mesh")
    s.add_argument("--align", choices=("start-frame", "umeyama"), default="start-frame")
    s.add_argument("--icp", action="store_true", help="refine the map alignment with point-to-point ICP")
    s.add_argument("--out", required=True)

    s = sub.add_parser("mesh", help="extract a mesh from a saved TSDF volume")
    s.add_argument("volume")
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.command == "simulate":
            out = cmd_simulate(args.spec, args.out, args.seed)
            print(f"dataset written to {out}")
        elif args.command == "slam":
            cfg = load_config(args.config) if args.config else PipelineConfig()
            info = cmd_slam(args.dataset, args.out, cfg, sync=args.sync, seed=args.seed)
            t = info["timings"]
            print(f"{info['frames']} frames, {info['submaps']} submaps, {info['loop_closures']} loop closures")
            print(f"frontend {t['frontend']['mean_ms']:.1f} ms/frame, backend {t['backend']['mean_ms']:.1f} ms/submap, "
                  f"global TSDF {t['global_tsdf']['mean_ms']:.1f} ms/update")
        elif args.command == "eval":
            rep = cmd_eval(args.est, args.gt, args.out, args.mesh, args.gt_mesh, args.align, args.icp)
            tr = rep["trajectory"]
            print(f"APE rms {tr['ape_rms']:.4f} m, std {tr['ape_std']:.4f} m ({tr['matched']} matched, {tr['unmatched']} unmatched)")
            if rep["map"]:
                print(f"map error {rep['map']['e_map']:.4f} m, std {rep['map']['e_std_map']:.4f} m")
        elif args.command == "mesh":
            m = cmd_mesh(args.volume, args.out)
            print(f"{len(m.vertices)} vertices, {len(m.triangles)} triangles")
    except (DatasetError, ConfigError, ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
