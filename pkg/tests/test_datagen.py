import filecmp
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topotraj.datagen import (
    DatagenParams, click_points, distance_to_polyline, generate_dataset, generate_scene, load_dataset, read_scene,
    sample_seed, within_polyline,
)
from topotraj.raster import GridSpec

GRID = GridSpec(64, 64, 1.0, ego_row=48, ego_col=32)
FAST = DatagenParams(cloud_points=3000)


def _dense(poly, step=0.05):
    out = [poly[0]]
    for a, b in zip(poly[:-1], poly[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        out.extend(a + (b - a) * t for t in np.arange(1, n + 1) / n)
    return np.array(out)


def test_same_seed_bit_identical():
    a, b = generate_scene(7, FAST, GRID), generate_scene(7, FAST, GRID)
    np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
    np.testing.assert_array_equal(a.gt_trajectory, b.gt_trajectory)
    assert a.map == b.map and a.pose == b.pose
    c = generate_scene(8, FAST, GRID)
    assert not np.array_equal(a.gt_trajectory, c.gt_trajectory)


def test_zero_curvature_straight_road():
    s = generate_scene(3, DatagenParams(curvature_max=0.0, cloud_points=500), GRID)
    g = s.gt_trajectory
    d = g[-1] - g[0]
    n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    assert np.max(np.abs((g - g[0]) @ n)) < 1e-6


def test_infeasible_params_rejected():
    for bad in (dict(road_width=0), dict(curvature_max=-0.1), dict(road_length=50), dict(map_noise=-1)):
        with pytest.raises(ValueError):
            generate_scene(0, DatagenParams(**bad), GRID)


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_scene_invariants(seed):
    p = FAST
    s = generate_scene(seed, p, GRID)
    line = s.centerline
    # map within noise (+ chord sagitta of the clicks) of the true centerline, by dense sampling
    dev = distance_to_polyline(_dense(s.map.vertices[np.r_[s.map.edges[:, 0], s.map.edges[-1, 1]]]), line)
    verts_dev = distance_to_polyline(s.map.vertices, line)
    bound = p.map_noise + p.click_sagitta + 1e-3
    assert verts_dev.max() <= bound and dev.max() <= bound
    # ground truth inside the road corridor
    assert distance_to_polyline(s.gt_trajectory, line).max() < p.road_width / 2
    # waypoint spacing: chords of 2 m arcs at the curvature limit
    k = p.curvature_max
    min_chord = 2 / k * math.sin(k * p.waypoint_spacing / 2) if k > 0 else p.waypoint_spacing
    steps = np.linalg.norm(np.diff(s.gt_trajectory, axis=0), axis=1)
    assert steps.sum() >= (p.num_waypoints - 1) * min_chord - 1e-6
    assert len(s.gt_trajectory) == p.num_waypoints
    # intensity separates road from off-road returns
    acc = np.mean((s.cloud.points[:, 3] > 0.5) == s.road_label)
    assert acc >= 0.95


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), radius=st.floats(0.1, 8.0), tile=st.sampled_from([1.0, 8.0, 50.0]))
def test_within_polyline_matches_exact_distance(seed, radius, tile):
    rng = np.random.default_rng(seed)
    line = np.cumsum(rng.normal(0, 3, (rng.integers(2, 40), 2)), axis=0)
    pts = rng.uniform(-30, 30, (500, 2))
    np.testing.assert_array_equal(within_polyline(pts, line, radius, tile), distance_to_polyline(pts, line) < radius)


def test_click_points_sagitta_bound():
    s = generate_scene(2, FAST, GRID)
    clicks = click_points(s.centerline, 25.0, 0.25)
    assert distance_to_polyline(s.centerline, clicks).max() <= 0.25 + 1e-3
    np.testing.assert_allclose(clicks[0], s.centerline[0])


def test_dataset_layout_and_regeneration(tmp_path):
    m = generate_dataset(4, 5, FAST, tmp_path / "a", "train", GRID)
    assert m["count"] == 4 and len(m["samples"]) == 4
    dirs = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert dirs == [f"sample_{i:05d}" for i in range(4)]
    for d in dirs:
        assert (tmp_path / "a" / d / "cloud.tpc").read_bytes()[:4] == b"TPC1"
        doc = json.loads((tmp_path / "a" / d / "scene.json").read_text())
        assert {"pose", "map", "gt_trajectory"} <= set(doc)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [e["seed"] for e in manifest["samples"]] == [sample_seed("train", 5, i) for i in range(4)]
    generate_dataset(4, 5, FAST, tmp_path / "b", "train", GRID)
    for d in dirs + ["."]:
        for f in ("cloud.tpc", "scene.json", "manifest.json"):
            pa = tmp_path / "a" / d / f
            if pa.exists():
                assert filecmp.cmp(pa, tmp_path / "b" / d / f, shallow=False)


def test_round_trip_through_disk(tmp_path):
    generate_dataset(2, 0, FAST, tmp_path, "test", GRID)
    scenes = load_dataset(tmp_path)
    orig = generate_scene(sample_seed("test", 0, 1), FAST, GRID)
    np.testing.assert_allclose(scenes[1].gt_trajectory, orig.gt_trajectory)
    np.testing.assert_allclose(scenes[1].cloud.points, orig.cloud.points, atol=1e-5)
    assert scenes[1].pose == orig.pose
    assert read_scene(tmp_path / "sample_00001").scene_id == f"test-{sample_seed('test', 0, 1)}"


def test_splits_disjoint():
    train = {sample_seed("train", s, i) for s in range(5) for i in range(50)}
    test = {sample_seed("test", s, i) for s in range(5) for i in range(50)}
    assert not train & test
    with pytest.raises(ValueError):
        sample_seed("val", 0, 0)


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_dataset(1, 0, FAST, blocker / "sub", "train", GRID)


def test_load_dataset_empty(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
