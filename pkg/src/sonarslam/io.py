"""File formats: PLY clouds and meshes, TUM trajectories, dataset directories."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RigidPose, SonarFrame
from .tsdf import TriangleMesh

__all__ = [
    "DatasetError",
    "write_ply",
    "read_ply",
    "write_tum",
    "read_tum",
    "format_tum",
    "Dataset",
    "load_dataset",
    "write_manifest",
    "read_manifest",
]


class DatasetError(ValueError):
    pass


_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
}


def write_ply(path, vertices, triangles=None, binary: bool = True) -> None:
    """Write xyz float32 vertices and optional triangle faces."""
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    f = None if triangles is None else np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    if f is not None:
        header += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(v.tobytes())
            if f is not None and len(f):
                rec = np.zeros(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
                rec["n"] = 3
                rec["idx"] = f
                fh.write(rec.tobytes())
        else:
            for p in v:
                fh.write(" ".join(repr(float(x)) for x in p).encode("ascii") + b"\n")
            if f is not None:
                for t in f:
                    fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))


def _parse_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise DatasetError(f"{path}: not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise DatasetError(f"{path}: truncated PLY header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise DatasetError(f"{path}: property before element")
            elements[-1][2].append(parts[1:])
    if fmt not in ("ascii", "binary_little_endian"):
        raise DatasetError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def read_ply(path, with_faces: bool = False):
    """Read vertex xyz (float64) and, if requested, triangle faces from a PLY file."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from None
    with fh:
        fmt, elements = _parse_header(fh, path)
        data = fh.read()
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    if fmt == "ascii":
        lines = data.decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            rows = lines[pos:pos + count]
            pos += count
            if name == "vertex":
                names = [p[-1] for p in props]
                arr = np.array([r.split() for r in rows], dtype=float).reshape(count, len(props))
                verts = arr[:, [names.index(a) for a in "xyz"]]
            elif name == "face":
                fl = [r.split() for r in rows]
                if any(int(r[0]) != 3 for r in fl):
                    raise DatasetError(f"{path}: only triangle faces are supported")
                faces = np.array([r[1:4] for r in fl], dtype=np.int64).reshape(-1, 3)
    else:
        off = 0
        for name, count, props in elements:
            if props and props[0][0] == "list":
                _, ctype, itype, _ = props[0]
                if len(props) != 1:
                    raise DatasetError(f"{path}: unsupported face layout")
                dt = np.dtype([("n", "<" + _PLY_TYPES[ctype]), ("idx", "<" + _PLY_TYPES[itype], (3,))])
                rec = np.frombuffer(data, dtype=dt, count=count, offset=off)
                if count and np.any(rec["n"] != 3):
                    raise DatasetError(f"{path}: only triangle faces are supported")
                off += dt.itemsize * count
                if name == "face":
                    faces = rec["idx"].astype(np.int64)
                continue
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            if off + dt.itemsize * count > len(data):
                raise DatasetError(f"{path}: truncated PLY body")
            rec = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
    if with_faces:
        return verts, faces
    return verts


def format_tum(timestamp: float, pose: RigidPose) -> str:
    q = pose.quaternion()  # (x, y, z, w)
    vals = [timestamp, *pose.translation, *q]
    return " ".join(f"{v:.9g}" for v in vals)


def write_tum(path, timestamps, poses) -> None:
    with open(path, "w") as fh:
        for t, p in zip(timestamps, poses):
            fh.write(format_tum(t, p) + "\n")


def read_tum(path):
    """Timestamps and poses from a TUM file (``t x y z qx qy qz qw`` per line)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from None
    times, poses = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
        try:
            v = [float(x) for x in parts]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric value") from None
        times.append(v[0])
        try:
            poses.append(RigidPose.from_quaternion(v[4:8], v[1:4]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(times), poses


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k} = {v}\n")


def read_manifest(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


@dataclass
class Dataset:
    root: Path
    timestamps: np.ndarray
    odometry: list
    ground_truth: list | None = None
    gt_mesh: TriangleMesh | None = None
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.odometry)

    def frame_path(self, index: int) -> Path:
        return self.root / "frames" / f"{index:06d}.ply"

    def frame(self, index: int) -> SonarFrame:
        try:
            cloud = read_ply(self.frame_path(index))
        except DatasetError as exc:
            raise DatasetError(f"frame {index}: {exc}") from None
        return SonarFrame(index, float(self.timestamps[index]), cloud, self.odometry[index])

    def frames(self):
        for i in range(len(self)):
            yield self.frame(i)


def load_dataset(root) -> Dataset:
    """Open a dataset directory and check its layout against the manifest."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset directory not found")
    manifest_path = root / "manifest.txt"
    if not manifest_path.exists():
        raise DatasetError(f"{root}: missing manifest.txt")
    manifest = read_manifest(manifest_path)
    if not (root / "odom.tum").exists():
        raise DatasetError(f"{root}: missing odom.tum")
    times, odom = read_tum(root / "odom.tum")
    try:
        count = int(manifest["frame_count"])
    except (KeyError, ValueError):
        raise DatasetError(f"{manifest_path}: frame_count missing or invalid") from None
    if len(odom) != count:
        raise DatasetError(f"{root}: odom.tum has {len(odom)} poses but manifest declares {count} frames")
    frames_dir = root / "frames"
    present = sorted(frames_dir.glob("*.ply")) if frames_dir.is_dir() else []
    expected = [f"{i:06d}.ply" for i in range(count)]
    names = [p.name for p in present]
    if names != expected:
        missing = sorted(set(expected) - set(names))
        where = f"frame {int(missing[0][:6])}" if missing else "frames/"
        raise DatasetError(f"{root}: frame files must be numbered densely from 0 ({where} missing or extra files)")
    gt = None
    if (root / "gt.tum").exists():
        gt_times, gt = read_tum(root / "gt.tum")
        if len(gt) != count or not np.array_equal(gt_times, times):
            raise DatasetError(f"{root}: gt.tum timestamps do not match odom.tum")
    mesh = None
    if (root / "gt_mesh.ply").exists():
        v, f = read_ply(root / "gt_mesh.ply", with_faces=True)
        mesh = TriangleMesh(v, f)
    return Dataset(root, times, odom, gt, mesh, manifest)


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from None
    return path
