import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sonarslam.core import RigidPose

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_pose(rng, trans_scale=2.0, max_angle=None) -> RigidPose:
    if max_angle is None:
        R = Rotation.random(random_state=rng).as_matrix()
    else:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()
    return RigidPose(R, rng.uniform(-trans_scale, trans_scale, 3))


def pose_strategy(trans_scale=5.0, max_angle=3.0):
    """Poses built from a rotation vector of norm < max_angle and a bounded translation."""
    vec = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)
    return st.builds(
        lambda axis, angle, t: RigidPose(
            Rotation.from_rotvec(_unit(axis) * angle).as_matrix(), np.asarray(t) * trans_scale
        ),
        vec,
        st.floats(0, max_angle, allow_nan=False),
        vec,
    )


def _unit(v):
    v = np.asarray(v, float)
    n = np.linalg.norm(v)
    return v / n if n > 1e-6 else np.array([0.0, 0.0, 1.0])


def plane_points(rng, n, normal, offset, extent=2.0, center=(0.0, 0.0, 0.0)):
    """``n`` points uniformly on a square patch of the plane ``normal . x = offset``."""
    normal = _unit(normal)
    a = np.cross(normal, [1.0, 0, 0] if abs(normal[0]) < 0.9 else [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    uv = rng.uniform(-extent, extent, (n, 2))
    c = np.asarray(center, float)
    c = c - (c @ normal - offset) * normal
    return c + uv[:, :1] * a + uv[:, 1:] * b


def corner_scene(rng, n_per=1500, size=4.0, extra_patches=0) -> np.ndarray:
    """Three mutually orthogonal square faces meeting at a corner, randomly rotated,
    optionally with extra randomly oriented patches."""
    faces = []
    for ax in range(3):
        p = np.zeros((n_per, 3))
        others = [a for a in range(3) if a != ax]
        p[:, others] = rng.uniform(0, size, (n_per, 2))
        faces.append(p)
    for _ in range(extra_patches):
        faces.append(plane_points(rng, n_per, rng.normal(size=3), 0.0, 1.5, rng.uniform(1, 3, 3)))
    R = Rotation.random(random_state=rng).as_matrix()
    return np.vstack(faces) @ R.T + rng.uniform(-2, 2, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def render_frames(scene, truth, odom=None, model=None, rate=6.0):
    """Noise-free SonarFrames of ``scene`` seen from ``truth`` poses."""
    from sonarslam.core import SonarFrame
    from sonarslam.simkit import SensorModel, render_frame

    model = model or SensorModel(range_noise_sigma=0.0)
    odom = truth if odom is None else odom
    out = []
    for k, (p, o) in enumerate(zip(truth, odom)):
        pts = render_frame(scene, p, model, np.random.default_rng([model.rng_seed, k]))
        out.append(SonarFrame(k, k / rate, pts, o))
    return out


def room_scene():
    """Inside of a 12 x 8 x 4 m box with two fixtures: observable in every direction."""
    from sonarslam.simkit import Box, Scene, Sphere

    return Scene((
        Box((6.0, 4.0, 2.0), (6.0, 4.0, 2.0)),
        Box((9.0, 2.0, 3.4), (0.6, 0.5, 0.6), 25.0),
        Sphere((8.5, 5.5, 3.0), 0.9),
    ))


class SlamSession:
    """A bundled scenario simulated and run once through the ``--sync`` CLI path."""

    def __init__(self, dataset, out, run_log, result):
        import json

        from sonarslam.io import load_dataset

        self.dataset = dataset
        self.out = out
        self.run_log = run_log
        self.result = result
        self.data = load_dataset(dataset)
        self.metrics = json.loads((out / "metrics.json").read_text())


def _slam_session(tmp_path_factory, scenario):
    from sonarslam.cli import cmd_simulate, run_dataset

    root = tmp_path_factory.mktemp(scenario)
    dataset = cmd_simulate(scenario, root / "data")
    run_log, result = run_dataset(dataset, root / "run", sync=True)
    return SlamSession(dataset, root / "run", run_log, result)


@pytest.fixture(scope="session")
def quarry_session(tmp_path_factory):
    return _slam_session(tmp_path_factory, "quarry-wall")


@pytest.fixture(scope="session")
def tank_session(tmp_path_factory):
    return _slam_session(tmp_path_factory, "tank")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
