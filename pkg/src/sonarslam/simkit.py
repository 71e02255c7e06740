"""Deterministic synthetic sonar data: analytic scenes, fan-beam raycasting, drifting odometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numba
import numpy as np

from .core import RigidPose, compose, inverse, rot_z, so3_exp
from .tsdf import TriangleMesh

__all__ = [
    "Plane",
    "Box",
    "Sphere",
    "Heightfield",
    "Scene",
    "SensorModel",
    "DriftModel",
    "Scenario",
    "ScenarioError",
    "beam_directions",
    "render_frame",
    "simulate_odometry",
    "trajectory_from_waypoints",
    "parse_scenario",
    "load_scenario",
    "bundled_scenario",
    "BUNDLED_SCENARIOS",
    "generate_dataset",
]

_EPS_T = 1e-9


# --- primitives ------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    size: float = 40.0  # only used to triangulate the reference mesh

    def intersect(self, origins, dirs):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point, float) - origins) @ n) / denom
        return np.where((np.abs(denom) > 1e-15) & (t > _EPS_T), t, np.inf)

    def mesh(self, resolution: float):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        a = np.cross(n, [1.0, 0, 0] if abs(n[0]) < 0.9 else [0, 1.0, 0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        h = self.size / 2
        p = np.asarray(self.point, float)
        v = np.array([p - h * a - h * b, p + h * a - h * b, p + h * a + h * b, p - h * a + h * b])
        return v, np.array([[0, 1, 2], [0, 2, 3]])


@dataclass(frozen=True)
class Box:
    """Box with half extents ``half`` about ``center``, rotated by ``yaw`` degrees about z."""

    center: tuple
    half: tuple
    yaw: float = 0.0

    def _pose(self) -> RigidPose:
        return RigidPose(rot_z(math.radians(self.yaw)), self.center)

    def intersect(self, origins, dirs):
        pose = self._pose()
        R = pose.rotation
        o = (origins - pose.translation) @ R
        d = dirs @ R
        h = np.asarray(self.half, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        t1 = np.where(np.abs(d) < 1e-15, np.where(np.abs(o) <= h, -np.inf, np.inf), t1)
        t2 = np.where(np.abs(d) < 1e-15, np.where(np.abs(o) <= h, np.inf, np.inf), t2)
        t_near = np.max(np.minimum(t1, t2), axis=1)
        t_far = np.min(np.maximum(t1, t2), axis=1)
        hit = t_near <= t_far
        t = np.where(t_near > _EPS_T, t_near, np.where(t_far > _EPS_T, t_far, np.inf))
        return np.where(hit, t, np.inf)

    def mesh(self, resolution: float):
        h = np.asarray(self.half, float)
        verts, tris = [], []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                u, v = [a for a in range(3) if a != axis]
                nu = max(1, int(math.ceil(2 * h[u] / resolution)))
                nv = max(1, int(math.ceil(2 * h[v] / resolution)))
                gu, gv = np.meshgrid(np.linspace(-h[u], h[u], nu + 1), np.linspace(-h[v], h[v], nv + 1), indexing="ij")
                pts = np.zeros((gu.size, 3))
                pts[:, axis] = sign * h[axis]
                pts[:, u] = gu.ravel()
                pts[:, v] = gv.ravel()
                base = sum(len(x) for x in verts)
                verts.append(pts)
                idx = np.arange(gu.size).reshape(gu.shape)
                a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
                tris.append(base + np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)]))
        return self._pose().apply(np.concatenate(verts)), np.concatenate(tris)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center, float)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        t = np.where(t1 > _EPS_T, t1, np.where(t2 > _EPS_T, t2, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def mesh(self, resolution: float):
        n_lat = max(8, int(math.ceil(math.pi * self.radius / resolution)))
        n_lon = 2 * n_lat
        th = np.linspace(0, math.pi, n_lat + 1)
        ph = np.linspace(0, 2 * math.pi, n_lon, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        v = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
        v = v * self.radius + np.asarray(self.center, float)
        idx = np.arange(v.shape[0]).reshape(n_lat + 1, n_lon)
        nxt = np.roll(idx, -1, axis=1)
        a, b, c, d = idx[:-1], idx[1:], nxt[1:], nxt[:-1]
        tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
        return v, tris


@numba.njit(cache=True)
def _height(x, y, amp, kx, ky, phase):
    h = 0.0
    for i in range(amp.shape[0]):
        h += amp[i] * math.sin(kx[i] * x + ky[i] * y + phase[i])
    return h


@numba.njit(cache=True)
def _heightfield_hits(o, d, lo, hi, zmax, step, amp, kx, ky, phase):
    n = o.shape[0]
    out = np.full(n, np.inf)
    for r in range(n):
        # clip the ray to the bounding box of the surface
        t0, t1 = 0.0, np.inf
        bmin = (lo[0], lo[1], -zmax)
        bmax = (hi[0], hi[1], zmax)
        ok = True
        for a in range(3):
            if abs(d[r, a]) < 1e-15:
                if o[r, a] < bmin[a] or o[r, a] > bmax[a]:
                    ok = False
            else:
                ta = (bmin[a] - o[r, a]) / d[r, a]
                tb = (bmax[a] - o[r, a]) / d[r, a]
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        if not ok or t0 > t1:
            continue
        ta = t0
        fa = o[r, 2] + ta * d[r, 2] - _height(o[r, 0] + ta * d[r, 0], o[r, 1] + ta * d[r, 1], amp, kx, ky, phase)
        if fa <= 0.0:
            continue  # starts below the surface (looking from behind)
        while ta < t1:
            tb = min(ta + step, t1)
            fb = o[r, 2] + tb * d[r, 2] - _height(o[r, 0] + tb * d[r, 0], o[r, 1] + tb * d[r, 1], amp, kx, ky, phase)
            if fb <= 0.0:
                # Illinois variant of regula falsi on the bracket [ta, tb]
                side = 0
                tm = tb
                for _ in range(100):
                    if fb == 0.0 or tb - ta < 1e-13:
                        tm = tb
                        break
                    tm = (ta * fb - tb * fa) / (fb - fa)
                    fm = o[r, 2] + tm * d[r, 2] - _height(o[r, 0] + tm * d[r, 0], o[r, 1] + tm * d[r, 1], amp, kx, ky, phase)
                    if abs(fm) < 1e-13:
                        break
                    if fm > 0.0:
                        ta, fa = tm, fm
                        if side == 1:
                            fb *= 0.5
                        side = 1
                    else:
                        tb, fb = tm, fm
                        if side == -1:
                            fa *= 0.5
                        side = -1
                out[r] = tm
                break
            ta, fa = tb, fb
    return out


@dataclass(frozen=True)
class Heightfield:
    """Surface ``z = h(x, y)`` over ``[0, lx] x [0, ly]`` in a local frame placed by ``pose``.

    ``h`` is a sum of ``waves`` sinusoids of the given amplitude and wavelength whose
    directions and phases are drawn from ``seed``. ``pose`` is (x, y, z, yaw, pitch, roll)
    with angles in degrees (intrinsic Z-Y-X).
    """

    pose: tuple
    size: tuple
    amplitude: float = 0.2
    wavelength: float = 2.0
    waves: int = 6
    seed: int = 0

    @property
    def rigid(self) -> RigidPose:
        x, y, z, yaw, pitch, roll = self.pose
        return RigidPose.from_euler_zyx(math.radians(yaw), math.radians(pitch), math.radians(roll), (x, y, z))

    def _waves(self):
        rng = np.random.default_rng(self.seed)
        ang = rng.uniform(0, 2 * math.pi, self.waves)
        scale = rng.uniform(0.7, 1.3, self.waves)
        k = 2 * math.pi / (self.wavelength * scale)
        amp = np.full(self.waves, self.amplitude / math.sqrt(max(self.waves, 1)))
        return amp, k * np.cos(ang), k * np.sin(ang), rng.uniform(0, 2 * math.pi, self.waves)

    def height(self, x, y):
        amp, kx, ky, ph = self._waves()
        x = np.asarray(x, float)[..., None]
        y = np.asarray(y, float)[..., None]
        return np.sum(amp * np.sin(kx * x + ky * y + ph), axis=-1)

    def intersect(self, origins, dirs):
        pose = self.rigid
        R = pose.rotation
        o = np.ascontiguousarray((origins - pose.translation) @ R)
        d = np.ascontiguousarray(dirs @ R)
        amp, kx, ky, ph = self._waves()
        step = min(0.1, self.wavelength / 20.0)
        return _heightfield_hits(
            o, d, np.zeros(2), np.asarray(self.size, float), float(np.sum(np.abs(amp))) + 1e-9, step, amp, kx, ky, ph
        )

    def mesh(self, resolution: float):
        lx, ly = self.size
        nx = max(2, int(math.ceil(lx / resolution)) + 1)
        ny = max(2, int(math.ceil(ly / resolution)) + 1)
        gx, gy = np.meshgrid(np.linspace(0, lx, nx), np.linspace(0, ly, ny), indexing="ij")
        local = np.stack([gx.ravel(), gy.ravel(), self.height(gx.ravel(), gy.ravel())], -1)
        idx = np.arange(nx * ny).reshape(nx, ny)
        a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[1:, 1:], idx[:-1, 1:]
        tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
        return self.rigid.apply(local), tris


@dataclass(frozen=True)
class Scene:
    primitives: tuple = ()

    def raycast(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """First-hit distance along each unit ray (inf when nothing is hit)."""
        t = np.full(len(dirs), np.inf)
        for prim in self.primitives:
            t = np.minimum(t, prim.intersect(origins, dirs))
        return t

    def mesh(self, resolution: float = 0.05) -> TriangleMesh:
        verts, tris, base = [], [], 0
        for prim in self.primitives:
            v, f = prim.mesh(resolution)
            verts.append(v)
            tris.append(f + base)
            base += len(v)
        if not verts:
            return TriangleMesh()
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


# --- sensor ----------------------------------------------------------------------------


@dataclass(frozen=True)
class SensorModel:
    h_fov: float = 90.0
    v_fov: float = 40.0
    h_beams: int = 128
    v_beams: int = 48
    max_range: float = 15.0
    range_noise_sigma: float = 0.02
    dropout_prob: float = 0.0
    multipath_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.h_fov <= 0 or self.v_fov <= 0:
            raise ValueError("fields of view must be positive")
        for p in (self.dropout_prob, self.multipath_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


def beam_directions(model: SensorModel) -> np.ndarray:
    """Unit beam directions in the sensor frame (x forward, y right, z down)."""
    az = np.deg2rad(np.linspace(-model.h_fov / 2, model.h_fov / 2, model.h_beams))
    el = np.deg2rad(np.linspace(-model.v_fov / 2, model.v_fov / 2, model.v_beams))
    A, E = np.meshgrid(az, el, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)


def render_frame(scene: Scene, sensor_pose: RigidPose, model: SensorModel, rng: np.random.Generator) -> np.ndarray:
    """Simulated sonar returns in the sensor frame."""
    dirs = beam_directions(model)
    world_dirs = dirs @ sensor_pose.rotation.T
    origins = np.broadcast_to(sensor_pose.translation, world_dirs.shape)
    rng_t = scene.raycast(np.ascontiguousarray(origins), world_dirs)
    # draw every random stream for every beam so results do not depend on which beams hit
    noise = rng.normal(0.0, 1.0, len(dirs)) * model.range_noise_sigma
    drop = rng.uniform(size=len(dirs)) < model.dropout_prob
    ghost = rng.uniform(size=len(dirs)) < model.multipath_prob
    hit = np.isfinite(rng_t) & (rng_t <= model.max_range) & ~drop
    ranges = rng_t[hit] + noise[hit]
    pts = dirs[hit] * ranges[:, None]
    g = ghost[hit] & (2 * ranges <= model.max_range)
    if np.any(g):
        pts = np.concatenate([pts, dirs[hit][g] * (2 * ranges[g])[:, None]])
    return pts


# --- odometry --------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftModel:
    yaw_rate_bias: float = 0.0  # deg/s
    velocity_scale_error: float = 0.0
    sigma_trans: float = 0.0  # m per step
    sigma_rot: float = 0.0  # deg per step
    rng_seed: int = 0

    @property
    def is_null(self) -> bool:
        return not (self.yaw_rate_bias or self.velocity_scale_error or self.sigma_trans or self.sigma_rot)


def simulate_odometry(true_traj, drift: DriftModel, dt: float = 1.0 / 6.0) -> list:
    """Dead-reckon the true relative motions corrupted by heading bias, scale error and noise."""
    true_traj = list(true_traj)
    if not true_traj:
        raise ValueError("need at least one pose")
    if drift.is_null:
        return list(true_traj)
    rng = np.random.default_rng(drift.rng_seed)
    out = [true_traj[0]]
    bias = RigidPose(rot_z(math.radians(drift.yaw_rate_bias) * dt), np.zeros(3))
    for a, b in zip(true_traj[:-1], true_traj[1:]):
        rel = compose(inverse(a), b)
        n_rot = rng.normal(0.0, 1.0, 3) * math.radians(drift.sigma_rot)
        n_t = rng.normal(0.0, 1.0, 3) * drift.sigma_trans
        noisy = RigidPose(rel.rotation @ so3_exp(n_rot), rel.translation * (1.0 + drift.velocity_scale_error) + n_t)
        out.append(compose(compose(out[-1], noisy), bias))
    return out


def trajectory_from_waypoints(waypoints, speed: float, yaw_rate: float, rate: float):
    """Constant-speed piecewise-linear path through ``(x, y, z, yaw_deg)`` waypoints.

    Returns timestamps and level (roll = pitch = 0) body poses sampled at ``rate`` Hz.
    """
    wps = np.asarray(waypoints, float).reshape(-1, 4)
    if len(wps) == 0:
        raise ValueError("trajectory needs at least one waypoint")
    knots = [0.0]
    for a, b in zip(wps[:-1], wps[1:]):
        dist = np.linalg.norm(b[:3] - a[:3])
        turn = abs(b[3] - a[3])
        knots.append(knots[-1] + max(dist / speed, turn / yaw_rate, 1e-9))
    knots = np.asarray(knots)
    n = int(math.floor(knots[-1] * rate + 1e-9)) + 1
    times = np.arange(n) / rate
    poses = []
    for t in times:
        seg = min(int(np.searchsorted(knots, t, side="right")) - 1, len(wps) - 2) if len(wps) > 1 else 0
        if len(wps) == 1:
            p = wps[0]
        else:
            u = (t - knots[seg]) / (knots[seg + 1] - knots[seg])
            u = min(max(u, 0.0), 1.0)
            p = wps[seg] + u * (wps[seg + 1] - wps[seg])
        poses.append(RigidPose(rot_z(math.radians(p[3])), p[:3]))
    return times, poses


# --- scenario files --------------------------------------------------------------------


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    rate: float
    speed: float
    yaw_rate: float
    scene: Scene
    sensor: SensorModel
    drift: DriftModel
    waypoints: tuple
    mesh_resolution: float = 0.05

    def trajectory(self):
        return trajectory_from_waypoints(self.waypoints, self.speed, self.yaw_rate, self.rate)


def _floats(text: str, n: int | None, lineno: int):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ScenarioError(f"line {lineno}: expected numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ScenarioError(f"line {lineno}: expected {n} comma-separated values, got {text!r}")
    return vals


def _primitive(kind: str, args: list, lineno: int):
    kv = {}
    for a in args:
        if "=" not in a:
            raise ScenarioError(f"line {lineno}: expected key=value, got {a!r}")
        k, v = a.split("=", 1)
        kv[k] = v
    spec = {
        "plane": (Plane, {"point": 3, "normal": 3, "size": 1}),
        "box": (Box, {"center": 3, "half": 3, "yaw": 1}),
        "sphere": (Sphere, {"center": 3, "radius": 1}),
        "heightfield": (Heightfield, {"pose": 6, "size": 2, "amplitude": 1, "wavelength": 1, "waves": 1, "seed": 1}),
    }
    cls, shape = spec[kind]
    params = {}
    for k, v in kv.items():
        if k not in shape:
            raise ScenarioError(f"line {lineno}: unknown {kind} parameter {k!r}")
        vals = _floats(v, shape[k], lineno)
        params[k] = vals[0] if shape[k] == 1 else vals
    for k in ("waves", "seed"):
        if k in params:
            params[k] = int(params[k])
    try:
        return cls(**params)
    except TypeError as exc:
        raise ScenarioError(f"line {lineno}: {exc}") from None


_TOP_KEYS = {"name": str, "seed": int, "rate": float, "speed": float, "yaw_rate": float, "mesh_resolution": float}


def parse_scenario(text: str) -> Scenario:
    """Parse the scenario grammar: ``key = value`` settings, primitive lines, waypoints.

    Settings prefixed ``sensor.`` / ``drift.`` set :class:`SensorModel` / :class:`DriftModel`
    fields. ``waypoint x y z yaw_deg`` lines define the path in order.
    """
    top = {"name": "unnamed", "seed": 0, "rate": 6.0, "speed": 0.3, "yaw_rate": 15.0, "mesh_resolution": 0.05}
    sensor, drift, prims, wps = {}, {}, [], []
    sensor_fields = {f.name: f.type for f in fields(SensorModel)}
    drift_fields = {f.name: f.type for f in fields(DriftModel)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.split()[0]
        if head in ("plane", "box", "sphere", "heightfield"):
            prims.append(_primitive(head, line.split()[1:], lineno))
        elif head == "waypoint":
            parts = line.split()[1:]
            if len(parts) != 4:
                raise ScenarioError(f"line {lineno}: waypoint needs x y z yaw_deg")
            wps.append(_floats(",".join(parts), 4, lineno))
        elif "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key in _TOP_KEYS:
                    top[key] = _TOP_KEYS[key](val)
                elif key.startswith("sensor.") and key[7:] in sensor_fields:
                    sensor[key[7:]] = int(val) if key[7:] in ("h_beams", "v_beams", "rng_seed") else float(val)
                elif key.startswith("drift.") and key[6:] in drift_fields:
                    drift[key[6:]] = int(val) if key[6:] == "rng_seed" else float(val)
                else:
                    raise ScenarioError(f"line {lineno}: unknown setting {key!r}")
            except ValueError as exc:
                if isinstance(exc, ScenarioError):
                    raise
                raise ScenarioError(f"line {lineno}: bad value for {key!r}: {val!r}") from None
        else:
            raise ScenarioError(f"line {lineno}: cannot parse {raw.strip()!r}")
    if not wps:
        raise ScenarioError("scenario defines no waypoints")
    seed = top["seed"]
    sensor.setdefault("rng_seed", seed)
    drift.setdefault("rng_seed", seed + 1)
    try:
        sensor_model = SensorModel(**sensor)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    return Scenario(
        name=top["name"],
        seed=seed,
        rate=top["rate"],
        speed=top["speed"],
        yaw_rate=top["yaw_rate"],
        scene=Scene(tuple(prims)),
        sensor=sensor_model,
        drift=DriftModel(**drift),
        waypoints=tuple(wps),
        mesh_resolution=top["mesh_resolution"],
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from None
    try:
        return parse_scenario(text)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


_SCENARIO_DIR = Path(__file__).parent / "scenarios"
BUNDLED_SCENARIOS = ("corridor", "tank", "quarry-wall")


def bundled_scenario(name: str, seed: int | None = None) -> Scenario:
    """Load one of the committed scenario specs, optionally overriding its seed."""
    if name not in BUNDLED_SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {BUNDLED_SCENARIOS}")
    sc = load_scenario(_SCENARIO_DIR / f"{name}.scn")
    if seed is not None:
        sc = replace(sc, seed=seed, sensor=replace(sc.sensor, rng_seed=seed), drift=replace(sc.drift, rng_seed=seed + 1))
    return sc


def generate_dataset(scenario: Scenario, out_dir) -> Path:
    """Render every frame of ``scenario`` and write a dataset directory."""
    from .io import DatasetError, ensure_dir, write_manifest, write_ply, write_tum

    out = ensure_dir(out_dir)
    frames_dir = ensure_dir(out / "frames")
    times, truth = scenario.trajectory()
    odom = simulate_odometry(truth, scenario.drift, 1.0 / scenario.rate)
    try:
        for k, pose in enumerate(truth):
            rng = np.random.default_rng([scenario.sensor.rng_seed, k])
            pts = render_frame(scenario.scene, pose, scenario.sensor, rng)
            write_ply(frames_dir / f"{k:06d}.ply", pts.astype(np.float32))
        write_tum(out / "odom.tum", times, odom)
        write_tum(out / "gt.tum", times, truth)
        mesh = scenario.scene.mesh(scenario.mesh_resolution)
        write_ply(out / "gt_mesh.ply", mesh.vertices, mesh.triangles)
        s = scenario.sensor
        write_manifest(out / "manifest.txt", {
            "scenario": scenario.name,
            "seed": scenario.seed,
            "frame_count": len(truth),
            "rate_hz": repr(float(scenario.rate)),
            "h_fov_deg": repr(float(s.h_fov)),
            "v_fov_deg": repr(float(s.v_fov)),
            "h_beams": s.h_beams,
            "v_beams": s.v_beams,
            "max_range_m": repr(float(s.max_range)),
            "range_noise_sigma_m": repr(float(s.range_noise_sigma)),
        })
    except OSError as exc:
        raise DatasetError(f"{getattr(exc, 'filename', out)}: {exc.strerror}") from None
    return out
