import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gta.camera import Intrinsics, Pose
from gta.errors import BadParams
from gta.scene import (
    DEFAULT_BOUNDS,
    FAR_DEPTH,
    DatasetConfig,
    GroundPlane,
    Scene,
    Sphere,
    Texture,
    build_scene,
    frustum_overlap_fraction,
    generate_samples,
    make_dataset,
    pixel_rays,
    raycast_render,
)
from gta.store import read_manifest

SOLID = Texture("solid", (0.2, 0.4, 0.6), (0.0, 0.0, 0.0))


def test_build_scene_deterministic():
    a, b = build_scene(7), build_scene(7)
    assert a == b


def test_complexity_counts():
    assert len(build_scene(1, complexity=1).primitives) == 2
    with pytest.raises(BadParams):
        build_scene(1, complexity=0)


def test_primitive_centers_inside_bounds():
    lo, hi = (np.asarray(b) for b in DEFAULT_BOUNDS)
    for seed in range(20):
        for prim in build_scene(seed, complexity=16).primitives[1:]:
            c = np.asarray(prim.center)
            assert np.all(c >= lo) and np.all(c <= hi)


def test_far_plane_only():
    # Camera looking straight up (world -y); the ground below is never hit.
    scene = Scene((GroundPlane(1.5, SOLID),))
    up = Pose(np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]]), np.zeros(3))
    view = raycast_render(scene, up, Intrinsics.from_fov(4, 3))
    np.testing.assert_array_equal(view.depth, FAR_DEPTH)


def test_sphere_depth_on_axis():
    scene = Scene((Sphere((0.0, 0.0, 5.0), 1.0, SOLID),))
    intr = Intrinsics(20.0, 20.0, 2.0, 2.0, 5, 5)
    view = raycast_render(scene, Pose.identity(), intr)
    assert abs(view.depth[2, 2] - 4.0) < 1e-6
    np.testing.assert_allclose(view.rgb[2, 2], SOLID.color_a, atol=1e-7)


def test_render_deterministic():
    intr = Intrinsics.from_fov(24, 24)
    scene = build_scene(2)
    a = raycast_render(scene, Pose.identity(), intr)
    b = raycast_render(scene, Pose.identity(), intr)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_depth_lands_on_surfaces():
    intr = Intrinsics.from_fov(32, 32)
    pose = Pose.from_center(Rotation.from_euler("y", 8, degrees=True).as_matrix(), [0.4, -0.3, 0.0])
    for seed in range(3):
        scene = build_scene(seed)
        view = raycast_render(scene, pose, intr)
        o, d = pixel_rays(pose, intr)
        pts = o + view.depth.reshape(-1, 1).astype(np.float64) * d
        hit = view.depth.reshape(-1) < FAR_DEPTH
        # depth is stored as float32, so allow its rounding on top of 1e-4
        tol = 1e-4 + np.abs(view.depth.reshape(-1)[hit]) * 6e-8 * np.linalg.norm(d[hit], axis=1)
        assert np.all(scene.surface_distance(pts[hit]) < tol)


@pytest.mark.parametrize("offset", [(1.0, 0.0, -2.0), (-0.5, 0.25, 3.0)])
def test_render_translation_equivariance(offset):
    intr = Intrinsics.from_fov(32, 32)
    scene = build_scene(3)
    pose = Pose.from_center(Rotation.from_euler("y", 7, degrees=True).as_matrix(), [0.3, -0.2, 0.1])
    off = np.asarray(offset)
    moved = Pose(pose.rotation, pose.translation - pose.rotation @ off)
    a = raycast_render(scene, pose, intr)
    b = raycast_render(scene.translated(off), moved, intr)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.depth, b.depth)


def test_generate_samples_shapes_and_ids():
    cfg = DatasetConfig(scenes=3, views=4, resolution=16, seed=2)
    samples = generate_samples(cfg)
    assert [s.scene_id for s in samples] == [0, 1, 2]
    assert [s.trajectory.meta["kind"] for s in samples] == ["orbit", "dolly", "lateral"]
    tail = generate_samples(DatasetConfig(scenes=1, views=4, resolution=16, seed=2), start=2)[0]
    np.testing.assert_array_equal(tail.views[3].rgb, samples[2].views[3].rgb)
    for s in samples:
        assert len(s.views) == 4 and s.views[0].rgb.shape == (16, 16, 3)
        assert s.input_view is s.views[0] and len(s.targets) == 3
        assert s.trajectory.poses[0] == s.views[0].pose


def test_make_dataset_counts_and_determinism(tmp_path):
    cfg = DatasetConfig(scenes=1, views=2, resolution=8, seed=5)
    a = make_dataset(cfg, tmp_path / "a")
    b = make_dataset(cfg, tmp_path / "b")
    assert a == b
    man = read_manifest(tmp_path / "a")
    assert man["scene.0000.views"] == "2"
    assert len([k for k in man if k.endswith(".seed") and k.startswith("scene.")]) == 1


def test_dataset_config_validation():
    with pytest.raises(BadParams):
        DatasetConfig(scenes=0).validate()
    with pytest.raises(BadParams):
        DatasetConfig(kinds=("helix",)).validate()


def test_frustum_overlap_self_is_full():
    s = generate_samples(DatasetConfig(scenes=1, views=3, resolution=16, seed=9))[0]
    scene = build_scene(s.seed)
    assert frustum_overlap_fraction(s.views[0], s.views[0], scene) == 1.0
    assert 0.0 < frustum_overlap_fraction(s.views[0], s.views[2], scene) <= 1.0
