import json

import numpy as np
import pytest

from regconsist import IGNORE_LABEL
from regconsist.io import load_manifest
from regconsist.synthworld import (
    CEILING,
    FLOOR,
    WALL,
    Box,
    LabelRemap,
    Scene,
    cast_rays,
    default_camera,
    generate_scene,
    look_pose,
    remap_labels,
    render_view,
    sample_grid_views,
    surface_points,
    visible_from,
)


def test_scene_generation_is_deterministic():
    a, b = generate_scene(11, 6), generate_scene(11, 6)
    assert a.to_dict() == b.to_dict()
    assert generate_scene(12, 6).to_dict() != a.to_dict()


def test_scene_boxes_inside_room():
    s = generate_scene(5, 8)
    for box in s.boxes:
        assert np.all(np.asarray(box.lo) >= 0) and np.all(np.asarray(box.hi) <= s.extent)
        assert np.all(box.extent > 0)


def test_scene_dict_round_trip():
    s = generate_scene(2, 5)
    assert Scene.from_dict(json.loads(json.dumps(s.to_dict()))).to_dict() == s.to_dict()


def test_ray_hits_floor_at_known_depth():
    scene = Scene((4.0, 4.0, 3.0), [])
    cam = default_camera()
    pose = look_pose([2.0, 2.0, 1.0], 0.0, pitch_deg=90.0)  # positive pitch looks down
    d, label, hit, *_ = cast_rays(scene, cam, pose, np.array([cam.cy]), np.array([cam.cx]))
    assert d[0] == pytest.approx(1.0, abs=1e-9)
    assert label[0] == FLOOR
    assert hit[0] == pytest.approx([2.0, 2.0, 0.0], abs=1e-9)
    d, label, *_ = cast_rays(scene, cam, look_pose([2.0, 2.0, 1.0], 0.0, -90.0), np.array([cam.cy]), np.array([cam.cx]))
    assert d[0] == pytest.approx(2.0, abs=1e-9) and label[0] == CEILING


def test_render_shapes_and_depth_valid(small_scene, small_cam):
    pose = sample_grid_views(small_scene)[0]
    f = render_view(small_scene, small_cam, pose, "x")
    assert f.rgb.shape == (64, 64, 3) and f.rgb.dtype == np.uint8
    assert f.depth.dtype == np.float32 and np.all(f.depth > 0)
    assert f.labels.dtype == np.uint16 and f.labels.max() < small_scene.num_classes


def test_surface_points_visible_from_own_view(small_scene, small_cam):
    pose = sample_grid_views(small_scene)[3]
    f = render_view(small_scene, small_cam, pose, "x")
    vis = visible_from(small_scene, small_cam, pose, surface_points(f, small_cam).reshape(-1, 3), rel_tol=1e-4)
    assert vis.mean() > 0.999


def test_box_occludes_wall():
    scene = Scene((6.0, 4.0, 2.5), [Box((3.0, 1.5, 0.0), (3.4, 2.5, 2.5), 4, (0.5, 0.5, 0.5))])
    from regconsist.geometry import CameraModel

    cam = CameraModel(16.0, 16.0, 16.0, 16.0, 32, 32)
    f = render_view(scene, cam, look_pose([1.0, 2.0, 1.2], 0.0), "x")
    assert f.labels[16, 16] == 4
    wall_point = np.array([[6.0, 2.0, 1.2]])
    assert not visible_from(scene, cam, f.pose, wall_point)[0]
    assert visible_from(scene, cam, look_pose([5.0, 2.0, 1.2], 0.0), wall_point, rel_tol=1e-6)[0]


def test_grid_views_skip_blocked_points(small_scene):
    poses = sample_grid_views(small_scene, yaw_step=90)
    assert len(poses) % 4 == 0
    for p in poses:
        assert small_scene.contains(p.t)
    with pytest.raises(ValueError):
        sample_grid_views(small_scene, yaw_step=7)


def test_label_remap():
    lab = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.uint16)
    out = remap_labels(lab, LabelRemap({0: 0, 1: 0, 2: 1}, {3}))
    assert out.tolist() == [[0, 0, 1], [IGNORE_LABEL] * 3]
    with pytest.raises(ValueError):
        LabelRemap({1: 1}, {1})


def test_world_manifest_on_disk(small_world):
    m = load_manifest(small_world.root / "manifest.json")
    assert m.ids == small_world.ids
    assert len(m.ids) == 48
    assert m.num_classes == 9 and len(m.class_names) == 9
    f = m.load_frame(m.ids[0])
    assert f.labels is not None and f.labels.shape == (64, 64)
    assert WALL in np.unique(np.concatenate([m.load_frame(i).labels.ravel() for i in m.ids[:8]]))
