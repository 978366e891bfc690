import dataclasses

import numpy as np
import pytest

from mapnerf.dataio import load_dataset
from mapnerf.geometry import Camera, look_at_pose, ray_for_pixel
from mapnerf.scene import (
    LANE_CHANGE_ID_OFFSET,
    PARALLEL_ID_OFFSET,
    MapNoise,
    SceneConfig,
    export_sequence,
    extract_map,
    generate_scene,
    holdout_ids,
    make_trajectories,
    render_gt,
)

from conftest import SMALL_SCENE


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(), 42)


def test_generate_deterministic(scene):
    other = generate_scene(SceneConfig(), 42)
    np.testing.assert_array_equal(scene.mesh.vertices, other.mesh.vertices)
    np.testing.assert_array_equal(scene.texture, other.texture)
    assert len(scene.obstacles) == len(other.obstacles)
    for a, b in zip(scene.obstacles, other.obstacles):
        np.testing.assert_array_equal(a.center, b.center)


def test_zero_obstacles():
    s = generate_scene(dataclasses.replace(SceneConfig(), n_obstacles=0), 1)
    assert s.obstacles == ()
    assert np.all(s.material == -1)


def test_obstacle_bases_on_ground(scene):
    assert len(scene.obstacles) == 3
    for box in scene.obstacles:
        assert abs(box.base - scene.ground_height(*box.center)) < 1e-6


@pytest.mark.parametrize("change", [dict(length=0.0), dict(n_lanes=1), dict(width=-1.0)])
def test_bad_config_rejected(change):
    with pytest.raises(ValueError):
        generate_scene(dataclasses.replace(SceneConfig(), **change), 0)


def test_lane_stripes_in_albedo(scene):
    for yb in scene.lane_boundaries()[[0, -1]]:
        np.testing.assert_allclose(scene.albedo(np.array([5.0]), np.array([yb]))[0], (0.95, 0.93, 0.85))
    # dashed center marking: painted for x mod 4 < 2, asphalt otherwise
    assert scene.albedo(np.array([1.0]), np.array([0.0]))[0][2] == 0.25
    assert scene.albedo(np.array([3.0]), np.array([0.0]))[0][2] != 0.25


def test_sky_only_camera(scene):
    cam = Camera(20.0, 20.0, 8.0, 8.0, 16, 16, look_at_pose([5, 0, 3], [0, 0, 1], up=(1, 0, 0)))
    img, depth, valid = render_gt(scene, cam)
    assert not valid.any() and np.isnan(depth).all()
    np.testing.assert_array_equal(img, np.broadcast_to(scene.sky_color, img.shape))


def test_downward_camera_on_flat_ground():
    s = generate_scene(dataclasses.replace(SceneConfig(), ground_amplitude=0.0, n_obstacles=0), 0)
    cam = Camera(20.0, 20.0, 8.5, 8.5, 17, 17, look_at_pose([10.1, 0.1, 2.0], [0, 0, -1], up=(1, 0, 0)))
    _, depth, valid = render_gt(s, cam)
    assert valid.all()
    assert abs(depth[8, 8] - 2.0) < 1e-9


def test_depth_matches_reintersection(scene):
    cam = make_trajectories(scene)["train"].cameras[5]
    _, depth, valid = render_gt(scene, cam)
    rng = np.random.default_rng(0)
    for v, u in zip(rng.integers(cam.height, size=40), rng.integers(cam.width, size=40)):
        r = ray_for_pixel(cam, int(u), int(v))
        t, ids, _ = scene.mesh.intersect_bruteforce(r.origin, r.direction)
        if valid[v, u]:
            assert t[0] == depth[v, u]
        else:
            assert ids[0] == -1


def test_trajectories(scene):
    c = scene.config
    tr = make_trajectories(scene)
    assert len(tr["train"]) == len(tr["parallel"]) == c.n_frames
    assert len(tr["lane_change"]) == c.change_frames
    off = tr["parallel"].positions[:, 1] - tr["train"].positions[:, 1]
    assert np.abs(off - c.lane_width).max() < 1e-9
    np.testing.assert_allclose(tr["lane_change"].cameras[0].pose, tr["train"].cameras[0].pose, atol=1e-9)
    end = c.change_frames - 1
    np.testing.assert_allclose(tr["lane_change"].cameras[end].pose, tr["parallel"].cameras[end].pose, atol=1e-9)
    for t in tr.values():
        p = t.positions
        assert np.linalg.norm(np.diff(p, axis=0), axis=1).max() < 2.0
        assert np.all(p[:, 2] > scene.ground_height(p[:, 0], p[:, 1]))


def test_noise_free_map_exact(scene):
    hmap, lanes = extract_map(scene, MapNoise(0.0, 1.0, 0.0), 0)
    n = hmap.nodes
    np.testing.assert_array_equal(n[:, 2], scene.ground_height(n[:, 0], n[:, 1]))
    for a, b in zip(lanes, scene.lanes):
        np.testing.assert_array_equal(a, b)


def test_map_deterministic(scene):
    a, la = extract_map(scene, MapNoise(), 5)
    b, lb = extract_map(scene, MapNoise(), 5)
    np.testing.assert_array_equal(a.nodes, b.nodes)
    for p, q in zip(la, lb):
        np.testing.assert_array_equal(p, q)


def test_map_noise_statistics():
    s = generate_scene(dataclasses.replace(SceneConfig(), length=99.0, width=99.0, n_obstacles=0), 0)
    hmap, _ = extract_map(s, MapNoise(0.1, 1.0, 0.05), 11)
    n = hmap.nodes
    assert len(n) >= 10_000
    err = n[:, 2] - s.ground_height(n[:, 0], n[:, 1])
    assert 0.09 <= err.std() <= 0.11


def test_holdout_every_ninth():
    assert holdout_ids(list(range(319)))[:4] == [0, 9, 18, 27]
    assert len(holdout_ids(list(range(319)))) == 36


def test_export_round_trip(tmp_path):
    s = generate_scene(SMALL_SCENE, 4)
    traj = make_trajectories(s)["train"]
    hmap, lanes = extract_map(s, MapNoise(), 5)
    out = export_sequence(s, traj, hmap, lanes, tmp_path / "ds")
    ds = load_dataset(out)
    assert len(list((tmp_path / "ds" / "images").iterdir())) == len(traj)
    for i, cam in enumerate(traj.cameras):
        assert np.abs(ds.poses[i] - cam.pose).max() < 1e-9
        img, _, _ = render_gt(s, cam)
        np.testing.assert_array_equal(ds.images[i], np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
    assert ds.intrinsics == (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


def test_export_missing_directory(tmp_path):
    s = generate_scene(SMALL_SCENE, 4)
    traj = make_trajectories(s)["train"]
    hmap, lanes = extract_map(s, MapNoise(), 5)
    with pytest.raises(FileNotFoundError, match="nope"):
        export_sequence(s, traj, hmap, lanes, tmp_path / "nope" / "ds")


def test_scene_root_layout(small_scene_root):
    train = load_dataset(small_scene_root / "train")
    par = load_dataset(small_scene_root / "parallel")
    lc = load_dataset(small_scene_root / "lane_change")
    assert train.eval_ids == holdout_ids(train.frame_ids)
    assert set(train.train_ids) | set(train.eval_ids) == set(train.frame_ids)
    assert par.frame_ids[0] == PARALLEL_ID_OFFSET and lc.frame_ids[0] == LANE_CHANGE_ID_OFFSET
    assert par.eval_ids == par.frame_ids and not par.train_ids
