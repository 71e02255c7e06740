import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sonarslam.core import RigidPose, compose, inverse, rotation_angle
from sonarslam.features import pack_keys, voxel_keys
from sonarslam.tsdf import (
    GlobalMapState,
    TriangleMesh,
    TsdfVolume,
    coarse_point_cloud,
    extract_mesh,
    global_update,
    integrate_frame,
    rebuild_global,
    reprocess_decision,
    submap_contribution,
)

from conftest import random_pose

VS, TR = 0.1, 0.3


def value_at(vol, p):
    idx = vol.lookup(pack_keys(voxel_keys(np.atleast_2d(p), vol.voxel_size)))[0]
    return None if idx < 0 else (vol.d[idx], vol.w[idx])


def sphere_rays(center, radius, origin, n, rng):
    """Hits of rays from ``origin`` on a sphere (origin outside it)."""
    c, o = np.asarray(center, float), np.asarray(origin, float)
    to_c = c - o
    dist = np.linalg.norm(to_c)
    half = np.arcsin(radius / dist) * 0.95
    axis = to_c / dist
    a = np.cross(axis, [1.0, 0, 0] if abs(axis[0]) < 0.9 else [0, 1.0, 0])
    a /= np.linalg.norm(a)
    b = np.cross(axis, a)
    th = rng.uniform(0, half, n)
    ph = rng.uniform(0, 2 * np.pi, n)
    d = np.cos(th)[:, None] * axis + np.sin(th)[:, None] * (np.cos(ph)[:, None] * a + np.sin(ph)[:, None] * b)
    proj = d @ to_c
    t = proj - np.sqrt(proj**2 - (dist**2 - radius**2))
    return o + t[:, None] * d


def sphere_volume(center, radius, vs=VS, tr=TR, pad=4):
    c = np.asarray(center, float)
    lo = np.floor((c - radius) / vs).astype(int) - pad
    hi = np.floor((c + radius) / vs).astype(int) + pad
    ijk = np.stack(np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij"), -1).reshape(-1, 3)
    d = np.linalg.norm((ijk + 0.5) * vs - c, axis=1) - radius
    keep = np.abs(d) < 2 * tr
    return TsdfVolume.from_cells(ijk[keep], d[keep], np.ones(keep.sum()), vs, tr)


# integrate_frame


def test_single_ray_profile():
    vol = TsdfVolume(VS, TR)
    integrate_frame(vol, [0, 0, 0], [[2.0, 0, 0]])
    d_hit, _ = value_at(vol, [2.0, 0, 0])
    assert abs(d_hit) < VS
    assert value_at(vol, [1.0, 0, 0])[0] == pytest.approx(TR)
    assert value_at(vol, [2.2, 0, 0])[0] == pytest.approx(-0.2, abs=0.5 * VS)
    assert value_at(vol, [2.5, 0, 0]) is None  # beyond the truncation band


def test_integrating_same_frame_twice_doubles_weight(rng):
    pts = rng.uniform([2, -1, -1], [3, 1, 1], (300, 3))
    a = TsdfVolume(VS, TR)
    integrate_frame(a, [0, 0, 0], pts)
    b = a.copy()
    integrate_frame(b, [0, 0, 0], pts)
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_allclose(b.d, a.d, atol=1e-12)
    np.testing.assert_allclose(b.w, 2 * a.w)


def test_plane_zero_crossing_from_many_poses(rng):
    vol = TsdfVolume(VS, TR)
    plane_x = 3.03
    for _ in range(50):
        origin = rng.uniform([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])
        yz = rng.uniform(-1.5, 1.5, (2000, 2))
        integrate_frame(vol, origin, np.column_stack([np.full(2000, plane_x), yz]))
    ijk = vol.ijk
    cols = {}
    for (i, j, k), d in zip(ijk, vol.d):
        cols.setdefault((j, k), {})[i] = d
    errs = []
    for col in cols.values():
        for i, d in col.items():
            d2 = col.get(i + 1)
            if d2 is not None and d > 0 >= d2:
                x = (i + 0.5) * VS + VS * d / (d - d2)
                errs.append(abs(x - plane_x))
    errs = np.asarray(errs)
    assert len(errs) > 500
    assert np.mean(errs < VS / 2) >= 0.99


def test_truncation_clamp_holds(rng):
    vol = TsdfVolume(VS, TR)
    for _ in range(5):
        integrate_frame(vol, rng.normal(size=3) * 0.2, rng.uniform(1, 4, (500, 3)))
    assert np.all(np.abs(vol.d) <= TR + 1e-15)
    assert np.all(vol.w > 0)


@given(st.integers(0, 2**31 - 1))
def test_integration_is_point_order_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform([1, -1, -1], [2, 1, 1], (200, 3))
    a, b = TsdfVolume(VS, TR), TsdfVolume(VS, TR)
    integrate_frame(a, [0, 0, 0], pts)
    integrate_frame(b, [0, 0, 0], pts[rng.permutation(len(pts))])
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_allclose(a.d, b.d, atol=1e-9)
    np.testing.assert_allclose(a.w, b.w)


def test_zero_length_rays_are_skipped():
    vol = TsdfVolume(VS, TR)
    integrate_frame(vol, [1, 1, 1], [[1, 1, 1]])
    assert len(vol) == 0


def test_non_finite_origin_rejected():
    with pytest.raises(ValueError):
        integrate_frame(TsdfVolume(VS, TR), [np.nan, 0, 0], [[1.0, 0, 0]])


def test_compact_keeps_cells_and_allows_more_integration(rng):
    vol = TsdfVolume(VS, TR)
    pts = rng.uniform([2, -1, -1], [3, 1, 1], (300, 3))
    integrate_frame(vol, [0, 0, 0], pts)
    keys, d, w = vol.keys.copy(), vol.d.copy(), vol.w.copy()
    vol.compact()
    np.testing.assert_array_equal(vol.keys, keys)
    np.testing.assert_array_equal(vol.d, d)
    integrate_frame(vol, [0, 0, 0], pts)
    np.testing.assert_allclose(vol.w, 2 * w)


# coarse cloud


def test_coarse_cloud_of_empty_volume():
    assert coarse_point_cloud(TsdfVolume(VS, TR)).shape == (0, 3)


def test_coarse_cloud_matches_brute_force(rng):
    vol = TsdfVolume(VS, TR)
    integrate_frame(vol, [0, 0, 0], [[2.0, 0, 0]])
    for _ in range(3):
        integrate_frame(vol, rng.normal(size=3) * 0.3, rng.uniform(1, 3, (400, 3)))
    sel = (np.abs(vol.d) < VS / 2) & (vol.w > 0)
    ref = vol.centers()[sel]
    got = coarse_point_cloud(vol)
    np.testing.assert_allclose(got, ref)


def test_single_ray_coarse_cloud_is_near_surface_cells():
    vol = TsdfVolume(VS, TR)
    integrate_frame(vol, [0, 0, 0], [[2.0, 0, 0]])
    got = coarse_point_cloud(vol)
    assert len(got) >= 1
    for c in got:
        assert abs(value_at(vol, c)[0]) < VS / 2


def test_coarse_cloud_of_sphere_scene(rng):
    c, radius = np.array([0.0, 0.0, 0.0]), 1.0
    vol = TsdfVolume(VS, TR)
    for k in range(12):
        ang = 2 * np.pi * k / 12
        origin = [4 * np.cos(ang), 4 * np.sin(ang), 0.5 * np.sin(3 * ang)]
        integrate_frame(vol, origin, sphere_rays(c, radius, origin, 4000, rng))
    pts = coarse_point_cloud(vol)
    assert len(pts) > 100
    assert np.all(np.abs(np.linalg.norm(pts - c, axis=1) - radius) < VS)


# meshing


def test_mesh_of_uniform_free_space_is_empty():
    ijk = np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), -1).reshape(-1, 3)
    vol = TsdfVolume.from_cells(ijk, np.full(len(ijk), TR), np.ones(len(ijk)), VS, TR)
    assert len(extract_mesh(vol).triangles) == 0


def test_sphere_mesh_vertices_lie_on_sphere():
    c, radius = np.array([0.33, -0.12, 0.5]), 1.0
    mesh = extract_mesh(sphere_volume(c, radius))
    assert len(mesh.triangles) > 100
    assert np.all(np.abs(np.linalg.norm(mesh.vertices - c, axis=1) - radius) < VS / 2)
    # faces point outward, toward positive distance
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    assert np.mean(np.einsum("ij,ij->i", mesh.face_normals(), centroids - c) > 0) > 0.99


def test_plane_mesh_normals_align():
    n = np.array([0.3, -0.2, 1.0])
    n /= np.linalg.norm(n)
    ijk = np.stack(np.meshgrid(*[np.arange(-10, 10)] * 3, indexing="ij"), -1).reshape(-1, 3)
    d = (ijk + 0.5) * VS @ n - 0.07
    keep = np.abs(d) < 2 * TR
    mesh = extract_mesh(TsdfVolume.from_cells(ijk[keep], d[keep], np.ones(keep.sum()), VS, TR))
    assert len(mesh.triangles) > 50
    ang = np.degrees(np.arccos(np.clip(mesh.face_normals() @ n, -1, 1)))
    assert ang.max() < 2.0


def test_mesh_skips_cubes_with_missing_corners():
    # two isolated cells with opposite sign never form a full cube
    vol = TsdfVolume.from_cells([[0, 0, 0], [1, 0, 0]], [0.1, -0.1], [1, 1], VS, TR)
    assert len(extract_mesh(vol).triangles) == 0


def test_triangle_mesh_validates_indices():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


# global map algebra


def random_submap_volume(rng, n_frames=2):
    vol = TsdfVolume(VS, TR)
    for _ in range(n_frames):
        vol_origin = rng.normal(size=3) * 0.1
        pts = rng.uniform([0.8, -0.6, -0.6], [1.6, 0.6, 0.6], (150, 3))
        integrate_frame(vol, vol_origin, pts)
    vol.compact()
    return vol


def make_state(rng, n_submaps, interpolation="trilinear"):
    g = GlobalMapState(VS, TR, interpolation)
    histories = {}
    for sid in range(n_submaps):
        odom = random_pose(rng, 1.0, 0.5)
        histories[sid] = {}
        g.add_submap(sid, random_submap_volume(rng), odom, histories[sid])
    return g, histories


def field(g):
    return dict(zip(g.keys.tolist(), zip(g.num.tolist(), g.weight.tolist())))


def assert_fields_close(a: GlobalMapState, b: GlobalMapState, tol):
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_allclose(a.num, b.num, atol=tol, rtol=0)
    np.testing.assert_allclose(a.weight, b.weight, atol=tol, rtol=0)


def _trilinear_oracle(vol: TsdfVolume, x):
    """Eq-by-eq evaluation at a single local point: home cell must exist, corners that
    are absent drop out of the weights."""
    vs = vol.voxel_size
    home = np.floor(x / vs).astype(int)
    if value_at(vol, (home + 0.5) * vs) is None:
        return None
    u = x / vs - 0.5
    base = np.floor(u).astype(int)
    f = u - base
    wsum = dsum = bsum = 0.0
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                corner = base + [ox, oy, oz]
                cell = value_at(vol, (corner + 0.5) * vs)
                if cell is None:
                    continue
                beta = (f[0] if ox else 1 - f[0]) * (f[1] if oy else 1 - f[1]) * (f[2] if oz else 1 - f[2])
                dsum += beta * cell[0]
                wsum += beta * cell[1]
                bsum += beta
    d = dsum / bsum
    return wsum * d, wsum


def test_contribution_at_odometry_pose_is_own_field(rng):
    g, hist = make_state(rng, 1, "nearest")
    hist[0][1] = g.submaps[0].odom_pose
    # place the submap so its lattice coincides with the global one
    g.submaps[0].odom_pose = RigidPose.identity()
    hist[0][1] = RigidPose.identity()
    keys, psi, w = submap_contribution(g, 0, 1)
    vol = g.submaps[0].volume
    np.testing.assert_array_equal(keys, vol.keys)
    np.testing.assert_allclose(psi, vol.w * vol.d, atol=1e-15)
    np.testing.assert_allclose(w, vol.w)
    g.interpolation = "trilinear"
    keys2, psi2, w2 = submap_contribution(g, 0, 1)
    np.testing.assert_array_equal(keys2, vol.keys)
    np.testing.assert_allclose(psi2, psi, atol=1e-12)
    np.testing.assert_allclose(w2, w, atol=1e-12)


def test_contribution_shifted_by_one_voxel(rng):
    g, hist = make_state(rng, 1)
    hist[0][1] = RigidPose.identity()
    hist[0][2] = RigidPose.from_translation([VS, 0, 0])
    g.submaps[0].odom_pose = RigidPose.identity()
    k1, p1, w1 = submap_contribution(g, 0, 1)
    k2, p2, w2 = submap_contribution(g, 0, 2)
    shifted = pack_keys(voxel_keys((g.submaps[0].volume.ijk + [1.5, 0.5, 0.5]) * VS, VS))
    np.testing.assert_array_equal(k2, np.sort(shifted))
    np.testing.assert_allclose(p2, p1, atol=1e-9)
    np.testing.assert_allclose(w2, w1, atol=1e-9)


def test_contribution_matches_point_by_point_oracle(rng):
    g, hist = make_state(rng, 1)
    hist[0][3] = random_pose(rng, 1.0, 0.6)
    keys, psi, w = submap_contribution(g, 0, 3)
    rec = g.submaps[0]
    to_local = inverse(hist[0][3])
    ijk = np.stack(np.meshgrid(*[np.arange(-40, 41)] * 3, indexing="ij"), -1).reshape(-1, 3)
    # restrict the brute-force scan to the submap's world bounding box
    world = hist[0][3].apply(rec.volume.centers())
    lo, hi = np.floor(world.min(0) / VS) - 2, np.floor(world.max(0) / VS) + 2
    ijk = ijk[np.all((ijk >= lo) & (ijk <= hi), axis=1)]
    got = dict(zip(keys.tolist(), zip(psi, w)))
    n_checked = 0
    for cell in ijk:
        x = to_local.apply((cell + 0.5) * VS)
        ref = _trilinear_oracle(rec.volume, x)
        key = int(pack_keys(cell[None])[0])
        if ref is None:
            assert key not in got
            continue
        n_checked += 1
        np.testing.assert_allclose(got[key], ref, atol=1e-12)
    assert n_checked == len(keys) > 0


def test_missing_pose_index_is_an_error(rng):
    g, hist = make_state(rng, 1)
    with pytest.raises(ValueError):
        submap_contribution(g, 0, 7)


def test_unmoved_update_leaves_field_unchanged(rng):
    g, hist = make_state(rng, 2)
    for sid in hist:
        hist[sid][1] = random_pose(rng, 1.0, 0.5)
    global_update(g, new_submap=[0, 1], n=1)
    before = (g.keys.copy(), g.num.copy(), g.weight.copy())
    for sid in hist:
        hist[sid][2] = hist[sid][1]
    global_update(g, moved=[1], n=2)
    np.testing.assert_array_equal(g.keys, before[0])
    np.testing.assert_allclose(g.num, before[1], atol=1e-12, rtol=0)
    np.testing.assert_allclose(g.weight, before[2], atol=1e-12, rtol=0)
    assert g.integrated_pose_index == {0: 1, 1: 2}


def test_move_equals_rebuild(rng):
    g, hist = make_state(rng, 2)
    hist[0][1] = random_pose(rng, 0.5, 0.3)
    hist[1][1] = random_pose(rng, 0.5, 0.3)
    global_update(g, new_submap=[0, 1], n=1)
    hist[0][2] = hist[0][1]
    hist[1][2] = compose(hist[1][1], random_pose(rng, 0.2, 0.1))
    global_update(g, moved=[1], n=2)
    assert_fields_close(g, rebuild_global(g), 1e-9)


def test_remove_then_readd_is_exact(rng):
    g, hist = make_state(rng, 2)
    hist[0][1] = random_pose(rng, 0.5, 0.3)
    hist[1][1] = random_pose(rng, 0.5, 0.3)
    global_update(g, new_submap=[0, 1], n=1)
    before = (g.keys.copy(), g.num.copy(), g.weight.copy())
    g.remove(0)
    g.add(0, 1)
    np.testing.assert_array_equal(g.keys, before[0])
    np.testing.assert_allclose(g.num, before[1], atol=1e-12, rtol=0)
    np.testing.assert_allclose(g.weight, before[2], atol=1e-12, rtol=0)


def test_removing_everything_deletes_all_cells(rng):
    g, hist = make_state(rng, 1)
    hist[0][1] = RigidPose.identity()
    global_update(g, new_submap=0, n=1)
    assert len(g.keys) > 0
    g.remove(0)
    assert len(g.keys) == 0


def test_update_preconditions(rng):
    g, hist = make_state(rng, 2)
    hist[0][1] = RigidPose.identity()
    with pytest.raises(ValueError):
        global_update(g, moved=[0], n=1)
    global_update(g, new_submap=0, n=1)
    with pytest.raises(ValueError):
        global_update(g, new_submap=0, n=1)
    with pytest.raises(ValueError):
        global_update(g, new_submap=1)


def test_global_volume_respects_truncation(rng):
    g, hist = make_state(rng, 3)
    for sid in hist:
        hist[sid][1] = random_pose(rng, 0.3, 0.2)
    global_update(g, new_submap=list(hist), n=1)
    vol = g.volume
    assert len(vol) == len(g.keys)
    assert np.all(np.abs(vol.d) <= TR + 1e-15)
    assert np.all(vol.w > 0)


# reprocess decision


def test_reprocess_identical_poses(rng):
    p = random_pose(rng)
    assert not reprocess_decision(p, p, 0.01, 0.1)


def test_reprocess_translation_over_threshold(rng):
    p = random_pose(rng)
    assert reprocess_decision(p, compose(p, RigidPose.from_translation([0.02, 0, 0])), 0.01, 0.1)


def test_reprocess_rotation_exactly_at_threshold(rng):
    p = random_pose(rng)
    q = compose(p, RigidPose.from_euler_zyx(np.radians(0.1), 0, 0))
    assert np.degrees(rotation_angle(compose(inverse(p), q).rotation)) == pytest.approx(0.1, rel=1e-9)
    assert not reprocess_decision(p, q, 0.01, 0.1)
    r = compose(p, RigidPose.from_euler_zyx(np.radians(0.1001), 0, 0))
    assert reprocess_decision(p, r, 0.01, 0.1)
