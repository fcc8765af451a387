import json
import math

import numpy as np
import pytest

from gausssurf.ply import PlyFormatError, read_ply, write_ply
from gausssurf.scene_io import (Camera, CameraValidationError, EmptySceneError, Gaussian3D, Scene,
                                SyntheticSpec, clean_spec, load_cameras, load_gaussian_ply, look_at,
                                make_synthetic_scene, normalize_quaternions, save_cameras,
                                save_gaussian_ply, splat_ply_properties, splat_record_size)

from conftest import random_scene


def _single_vertex_ply(path, **overrides):
    props = {name: np.zeros(1, dtype=np.float32) for name in splat_ply_properties(0)}
    props["rot_0"][:] = 1.0
    for k, v in overrides.items():
        props[k] = np.array([v], dtype=np.float32)
    write_ply(path, {"vertex": props})


def test_opacity_logit_zero_gives_half(tmp_path):
    _single_vertex_ply(tmp_path / "one.ply", opacity=0.0)
    scene = load_gaussian_ply(tmp_path / "one.ply")
    assert len(scene) == 1
    assert scene.opacities[0] == 0.5


def test_quaternion_renormalized_on_load(tmp_path):
    _single_vertex_ply(tmp_path / "q.ply", rot_0=2.0)
    scene = load_gaussian_ply(tmp_path / "q.ply")
    np.testing.assert_array_equal(scene.quats[0], [1.0, 0.0, 0.0, 0.0])


def test_missing_property_is_named(tmp_path):
    props = {name: np.zeros(2, dtype=np.float32) for name in splat_ply_properties(0) if name != "scale_1"}
    write_ply(tmp_path / "bad.ply", {"vertex": props})
    with pytest.raises(PlyFormatError, match="scale_1"):
        load_gaussian_ply(tmp_path / "bad.ply")


def test_zero_vertices_is_empty_scene(tmp_path):
    props = {name: np.zeros(0, dtype=np.float32) for name in splat_ply_properties(0)}
    write_ply(tmp_path / "empty.ply", {"vertex": props})
    with pytest.raises(EmptySceneError):
        load_gaussian_ply(tmp_path / "empty.ply")


def test_round_trip_is_bit_exact(tmp_path):
    scene = random_scene(3, n=100, sh_coeffs=4)
    scene.quats[:] = normalize_quaternions(scene.quats)   # canonical input
    save_gaussian_ply(scene, tmp_path / "a.ply")
    loaded = load_gaussian_ply(tmp_path / "a.ply")
    save_gaussian_ply(loaded, tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    assert loaded.sh_degree == 1
    # the payload is float32; the loaded scene equals the float32-rounded input
    np.testing.assert_array_equal(loaded.means, scene.means.astype(np.float32).astype(np.float64))


def test_file_size_matches_record_layout(tmp_path):
    scene = random_scene(0, n=10_000, sh_coeffs=1)
    path = tmp_path / "big.ply"
    save_gaussian_ply(scene, path)
    raw = path.read_bytes()
    header_len = raw.index(b"end_header\n") + len(b"end_header\n")
    # 3 position + 3 normal + 3 dc + 1 opacity + 3 scale + 4 rot float32 fields
    assert splat_record_size(0) == 17 * 4
    assert len(raw) == header_len + 10_000 * splat_record_size(0)


def test_save_to_empty_path_fails():
    with pytest.raises((OSError, ValueError)):
        save_gaussian_ply(random_scene(0), "")


def test_normalization_idempotent(rng):
    q = rng.normal(size=(50, 4))
    once = normalize_quaternions(q)
    np.testing.assert_array_equal(normalize_quaternions(once), once)
    np.testing.assert_allclose(np.linalg.norm(once, axis=1), 1.0, atol=1e-12)


def test_gaussian_covariance_from_scales():
    g = Gaussian3D(np.zeros(3), np.log([0.1, 0.2, 0.3]), np.array([1.0, 0, 0, 0]), 0.0, np.zeros((1, 3)))
    np.testing.assert_allclose(g.covariance, np.diag([0.01, 0.04, 0.09]), atol=1e-15)


# -- cameras ---------------------------------------------------------------

def test_identity_camera_looks_down_plus_z_by_default():
    cam = Camera(64, 64, 100, 100, 32, 32, np.eye(4))
    np.testing.assert_allclose(cam.center, 0.0)
    np.testing.assert_allclose(cam.forward, [0, 0, 1])
    gl = Camera(64, 64, 100, 100, 32, 32, np.eye(4), convention="opengl")
    np.testing.assert_allclose(gl.forward, [0, 0, -1])


def test_cameras_round_trip(tmp_path, rng):
    cams = [Camera(32, 24, 40.5, 41.0, 16.2, 11.9, look_at(rng.normal(size=3) * 3, [0, 0, 0]))
            for _ in range(4)]
    save_cameras(cams, tmp_path / "cams.json")
    back = load_cameras(tmp_path / "cams.json")
    for a, b in zip(cams, back):
        np.testing.assert_allclose(a.world_to_cam, b.world_to_cam, atol=1e-12)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)


def test_camera_pose_of_wrong_length(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(
        [{"width": 8, "height": 8, "fx": 1, "fy": 1, "cx": 4, "cy": 4, "world_to_cam": [1.0] * 15}]))
    with pytest.raises(ValueError):
        load_cameras(tmp_path / "c.json")


def test_non_orthonormal_rotation_rejected(tmp_path):
    pose = np.eye(4)
    pose[0, 0] = 1.01
    (tmp_path / "c.json").write_text(json.dumps(
        [{"width": 8, "height": 8, "fx": 1, "fy": 1, "cx": 4, "cy": 4, "world_to_cam": pose.ravel().tolist()}]))
    with pytest.raises(CameraValidationError):
        load_cameras(tmp_path / "c.json")


def test_projection_of_point_on_axis():
    cam = Camera(64, 48, 100, 90, 32, 24, np.eye(4))
    uv, z = cam.project(np.array([[0.2, -0.1, 2.0]]))
    np.testing.assert_allclose(uv[0], [32 + 100 * 0.1, 24 - 90 * 0.05])
    assert z[0] == 2.0


# -- synthetic scenes --------------------------------------------------------

def test_sphere_means_on_surface_without_noise():
    scene, cams, sdf = make_synthetic_scene(SyntheticSpec("sphere", {"radius": 1.0}, n_gaussians=1000))
    assert np.max(np.abs(sdf(scene.means))) < 1e-9
    assert len(cams) > 0


def test_sphere_noise_bound():
    spec = SyntheticSpec("sphere", {"radius": 1.0}, n_gaussians=2000, noise=0.02, seed=4)
    scene, _, sdf = make_synthetic_scene(spec)
    assert np.max(np.abs(sdf(scene.means))) <= 0.02
    clean, _, _ = make_synthetic_scene(clean_spec(spec))
    assert np.max(np.abs(sdf(clean.means))) < 1e-9


def test_plane_thin_axis_is_normal():
    scene, _, _ = make_synthetic_scene(SyntheticSpec("plane", {"normal": [0.0, 0.6, 0.8]}, n_gaussians=200))
    R = scene.rotations
    axis = np.argmin(scene.scales, axis=1)
    thin = R[np.arange(len(scene)), :, axis]
    np.testing.assert_allclose(np.abs(thin @ np.array([0.0, 0.6, 0.8])), 1.0, atol=1e-9)


def test_box_sdf_values():
    _, _, sdf = make_synthetic_scene(SyntheticSpec("box", {"extents": [2.0, 2.0, 2.0]}, n_gaussians=10))
    np.testing.assert_allclose(sdf(np.array([[0.0, 0, 0], [2.0, 0, 0], [2.0, 2.0, 1.0]])),
                               [-1.0, 1.0, math.sqrt(2.0)])


def test_synthetic_seed_determinism():
    spec = SyntheticSpec("box", n_gaussians=300, noise=0.01, seed=11)
    a, _, _ = make_synthetic_scene(spec)
    b, _, _ = make_synthetic_scene(spec)
    for name in ("means", "log_scales", "quats", "opacity_logits", "sh"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.parametrize("bad", [dict(n_gaussians=0), dict(noise=-1.0), dict(surface="torus")])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        make_synthetic_scene(SyntheticSpec(**bad))


def test_scene_rejects_non_square_sh():
    with pytest.raises(ValueError):
        Scene(np.zeros((1, 3)), np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.zeros(1), np.zeros((1, 3, 3)))


def test_generic_ply_list_round_trip(tmp_path):
    faces = np.array([[0, 1, 2], [2, 1, 3]], dtype=np.int32)
    write_ply(tmp_path / "m.ply", {"vertex": {"x": np.arange(4, dtype=np.float64)},
                                   "face": {"vertex_indices": faces}})
    data = read_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(data["vertex"]["x"], np.arange(4))
    np.testing.assert_array_equal(np.asarray(data["face"]["vertex_indices"]), faces)
