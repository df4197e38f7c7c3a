import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import brute_nearest
from scenemocap.kinematics import CameraIntrinsics
from scenemocap.scene import (
    GRID_SHAPE,
    FrustumGrid,
    SceneFormatError,
    SceneIndex,
    ScenePointCloud,
    dump_grid,
    frustum_bins,
    frustum_normalize,
    load_cloud,
    load_grid_array,
    read_csv,
    read_ply,
    voxelize,
    write_csv,
    write_ply,
)

seeds = st.integers(0, 2**32 - 1)


# --- point cloud --------------------------------------------------------------


def test_cloud_validation():
    with pytest.raises(ValueError):
        ScenePointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        ScenePointCloud(np.array([[0, 0, -1.0]]))
    with pytest.raises(ValueError):
        ScenePointCloud(np.array([[0, np.nan, 1.0]]))
    with pytest.raises(ValueError):
        ScenePointCloud(np.ones((3, 2)))
    c = ScenePointCloud(np.ones((4, 3)))
    assert len(c) == 4
    assert not c.points.flags.writeable


# --- nearest ----------------------------------------------------------------


def test_nearest_self_query():
    pts = np.random.default_rng(0).uniform(0.5, 2, (50, 3))
    idx = SceneIndex(pts)
    i, d2 = idx.nearest(pts[17])
    assert (i, d2) == (17, 0.0)


def test_nearest_tie_breaks_to_lowest_index():
    pts = np.array([[1.0, 0, 1], [-1.0, 0, 1], [0, 5, 1]])
    idx = SceneIndex(pts)
    assert idx.nearest([0, 0, 1.0]) == (0, 1.0)
    pts2 = np.array([[0, 5, 1.0], [-1.0, 0, 1], [1.0, 0, 1]])
    assert SceneIndex(pts2).nearest([0, 0, 1.0]) == (1, 1.0)


def test_nearest_many_ties_beyond_k():
    # twelve points on a circle around the query: all tie, answer is index 0
    a = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts = np.stack([np.cos(a), np.sin(a), np.full(12, 3.0)], axis=1)
    pts = np.round(pts, 0)  # many exact duplicates at distance 1
    idx = SceneIndex(pts)
    q = np.array([0.0, 0.0, 3.0])
    assert idx.nearest(q) == brute_nearest(pts, q)


def test_nearest_matches_brute_force_1000_queries():
    rng = np.random.default_rng(7)
    pts = rng.uniform([-1, -1, 1], [1, 1, 3], (800, 3))
    queries = rng.uniform([-1.5, -1.5, 0.5], [1.5, 1.5, 3.5], (1000, 3))
    idx, d2 = SceneIndex(pts).nearest_many(queries)
    for q, i, d in zip(queries, idx, d2):
        bi, bd = brute_nearest(pts, q)
        assert i == bi
        assert d == bd


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 40))
def test_nearest_property_grid_points(seed, m):
    # coarse integer coordinates produce many exact ties
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 4, (m, 3)).astype(float) + [0, 0, 1]
    q = rng.integers(0, 4, 3).astype(float) + [0, 0, 1] + rng.choice([0.0, 0.5], 3)
    assert SceneIndex(pts).nearest(q) == brute_nearest(pts, q)


def test_within_radius_sorted():
    pts = np.array([[0, 0, 1.0], [0.05, 0, 1], [2, 2, 2], [0, 0.01, 1]])
    np.testing.assert_array_equal(SceneIndex(pts).within_radius([0, 0, 1.0], 0.1), [0, 1, 3])


# --- frustum normalisation and grid -----------------------------------------


def test_frustum_normalize_examples():
    cam = CameraIntrinsics(2, 2, 0, 0, 10, 10)
    np.testing.assert_allclose(frustum_normalize([1, 2, 4.0], cam), [0.5, 1.0, 4.0])
    cam1 = CameraIntrinsics(1, 1, 0, 0, 10, 10)
    np.testing.assert_allclose(frustum_normalize([2, 4, 2.0], cam1), [1, 2, 2])
    for z in (0.1, 1.0, 7.5):
        np.testing.assert_array_equal(frustum_normalize([0, 0, z], cam1), [0, 0, z])
    with pytest.raises(ValueError):
        frustum_normalize([0, 0, 0.0], cam1)


@given(seeds)
def test_frustum_normalize_preserves_depth(seed):
    p = np.random.default_rng(seed).uniform([-5, -5, 0.01], [5, 5, 20], (30, 3))
    out = frustum_normalize(p, CameraIntrinsics.default())
    np.testing.assert_array_equal(out[:, 2], p[:, 2])


def brute_bin(p, cam, z_near=0.5, z_far=8.0):
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    col = int(np.floor(u / cam.image_w * 32))
    row = int(np.floor(v / cam.image_h * 32))
    dep = int(np.floor((p[2] - z_near) / (z_far - z_near) * 256))
    if 0 <= col < 32 and 0 <= row < 32 and 0 <= dep < 256:
        return row, col, dep
    return None


def test_voxelize_single_and_duplicate_point():
    cam = CameraIntrinsics.default()
    g = voxelize(ScenePointCloud(np.array([[0.1, 0.2, 3.0]])), cam)
    assert g.occupancy.shape == GRID_SHAPE
    assert g.occupancy.sum() == 1
    assert tuple(np.argwhere(g.occupancy)[0]) == brute_bin(np.array([0.1, 0.2, 3.0]), cam)
    g2 = voxelize(ScenePointCloud(np.array([[0.1, 0.2, 3.0], [0.1001, 0.2, 3.0001]])), cam)
    assert g2.occupancy.sum() == 1


def test_voxelize_matches_brute_force_binning():
    cam = CameraIntrinsics.default()
    rng = np.random.default_rng(3)
    z = rng.uniform(0.6, 7.9, 100)
    u = rng.uniform(0, 225, 100)
    v = rng.uniform(0, 225, 100)
    pts = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    pts = np.concatenate([pts, [[50.0, 0, 1.0], [0, 0, 9.0]]])  # two out-of-range points
    g = voxelize(ScenePointCloud(pts), cam)
    expected = {b for b in (brute_bin(p, cam) for p in pts) if b is not None}
    got = {tuple(map(int, b)) for b in np.argwhere(g.occupancy > 0)}
    assert got == expected
    assert g.dropped == 2


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_voxelize_cover_property(seed):
    cam = CameraIntrinsics.default()
    pts = np.random.default_rng(seed).uniform([-3, -3, 0.2], [3, 3, 9], (60, 3))
    g = voxelize(ScenePointCloud(pts), cam)
    bins, ok = frustum_bins(pts, cam)
    occupied = {tuple(b) for b in np.argwhere(g.occupancy > 0)}
    assert occupied == {tuple(b) for b in bins[ok]}
    assert g.dropped == int((~ok).sum())
    assert set(np.unique(g.occupancy)) <= {0.0, 1.0}


def test_grid_validation():
    with pytest.raises(ValueError):
        FrustumGrid(np.zeros((4, 4, 4)), (0.5, 8.0), None)
    with pytest.raises(ValueError):
        FrustumGrid(np.full(GRID_SHAPE, 2.0), (0.5, 8.0), None)


def test_grid_dump_round_trip(tmp_path):
    cam = CameraIntrinsics.default()
    pts = np.random.default_rng(1).uniform([-1, -1, 1], [1, 1, 6], (200, 3))
    g = voxelize(ScenePointCloud(pts), cam)
    p = tmp_path / "g.bin"
    dump_grid(g, p)
    arr, rng_ = load_grid_array(p)
    np.testing.assert_array_equal(arr, g.occupancy)
    assert rng_ == (0.5, 8.0)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(SceneFormatError):
        load_grid_array(p)


# --- files ------------------------------------------------------------------


def test_ply_and_csv_round_trip(tmp_path):
    pts = np.random.default_rng(2).uniform([-1, -1, 1], [1, 1, 4], (25, 3))
    write_ply(tmp_path / "a.ply", pts)
    write_csv(tmp_path / "a.csv", pts)
    np.testing.assert_allclose(read_ply(tmp_path / "a.ply"), pts, rtol=1e-8)
    np.testing.assert_allclose(read_csv(tmp_path / "a.csv"), pts, rtol=1e-8)
    np.testing.assert_allclose(load_cloud(tmp_path / "a.ply").points, pts, rtol=1e-8)


def test_ply_extra_properties(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float nx\nproperty float x\n"
                 "property float y\nproperty float z\nelement face 0\nproperty list uchar int vertex_indices\n"
                 "end_header\n9 1 2 3\n9 4 5 6\n")
    np.testing.assert_array_equal(read_ply(p), [[1, 2, 3], [4, 5, 6]])


def test_csv_header_row(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y,z\n1,2,3\n")
    np.testing.assert_array_equal(read_csv(p), [[1, 2, 3]])


@pytest.mark.parametrize(
    "name,text",
    [
        ("bad.ply", "plx\n"),
        ("bin.ply", "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n"),
        ("short.ply", "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                      "property float z\nend_header\n1 2 3\n"),
        ("nan.ply", "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                    "property float z\nend_header\n1 two 3\n"),
        ("behind.csv", "0,0,-1\n"),
        ("cols.csv", "1,2\n"),
        ("scene.obj", "v 1 2 3\n"),
    ],
)
def test_malformed_files(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    with pytest.raises(SceneFormatError):
        load_cloud(p)


def test_cloud_combinations_are_independent():
    # the index never mutates its inputs
    pts = np.random.default_rng(5).uniform(0.5, 1.5, (10, 3))
    before = pts.copy()
    idx = SceneIndex(pts)
    for a, b in itertools.combinations(range(10), 2):
        idx.nearest((pts[a] + pts[b]) / 2)
    np.testing.assert_array_equal(pts, before)
