import math

import numpy as np
import pytest

from gausssurf import splat_render as sr
from gausssurf._backend import get_kernels
from gausssurf._geometry import rotmat_to_quat
from gausssurf.scene_io import Camera, Gaussian3D, Scene, look_at

from conftest import central_difference, front_camera, random_scene, rel_err

SH_C0 = 0.28209479177387814


def _backends():
    names = ["python"]
    try:
        get_kernels("cython")
        names.append("cython")
    except ImportError:  # pragma: no cover
        pass
    return names


BACKENDS = _backends()


def flat_scene(z_values, colors, opacity_logit=12.0, size=5.0, thin=1e-3):
    """Large flat Gaussians facing an identity camera, one per depth."""
    n = len(z_values)
    means = np.array([[0.0, 0.0, z] for z in z_values])
    log_scales = np.log(np.tile([size, size, thin], (n, 1)))
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = ((np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0).reshape(n, 1, 3)
    return Scene(means, log_scales, quats, np.full(n, opacity_logit), sh)


def test_on_axis_projection_closed_form():
    sigma, z = 0.1, 2.5
    cam = Camera(32, 32, 50.0, 50.0, 16, 16, np.eye(4))
    g = Gaussian3D(np.array([0, 0, z]), np.log([sigma] * 3), np.array([1.0, 0, 0, 0]), 0.0, np.zeros((1, 3)))
    s = sr.project_gaussian(g, cam, sr.RenderSettings(dilation=0.0))
    np.testing.assert_allclose(s.cov2d, (50.0 * sigma / z) ** 2 * np.eye(2), atol=1e-9)
    np.testing.assert_allclose(s.mean2d, [16, 16])
    assert s.depth == z


def test_behind_camera_is_culled():
    cam = Camera(32, 32, 50.0, 50.0, 16, 16, np.eye(4))
    g = Gaussian3D(np.array([0, 0, -1.0]), np.log([0.1] * 3), np.array([1.0, 0, 0, 0]), 0.0, np.zeros((1, 3)))
    assert sr.project_gaussian(g, cam) is None


def test_rigid_translation_invariance(rng):
    g = Gaussian3D(np.array([0.1, -0.2, 3.0]), np.log([0.1, 0.2, 0.05]), rng.normal(size=4), 0.3,
                   np.zeros((1, 3)))
    g.rot = g.rot / np.linalg.norm(g.rot)
    cam = Camera(32, 32, 40.0, 40.0, 16, 16, look_at([0.3, 0.1, -1.0], [0, 0, 3.0], [0, -1, 0]))
    shift = np.array([5.0, -2.0, 7.0])
    pose = cam.world_to_cam.copy()
    pose[:3, 3] -= pose[:3, :3] @ shift
    cam2 = Camera(32, 32, 40.0, 40.0, 16, 16, pose)
    g2 = Gaussian3D(g.mean + shift, g.log_scale, g.rot, g.opacity_logit, g.sh)
    a, b = sr.project_gaussian(g, cam), sr.project_gaussian(g2, cam2)
    np.testing.assert_allclose(a.mean2d, b.mean2d, atol=1e-9)
    np.testing.assert_allclose(a.cov2d, b.cov2d, atol=1e-9)
    assert a.depth == pytest.approx(b.depth, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_pixel_is_background(backend):
    scene = flat_scene([2.0], [[0.2, 0.4, 0.6]], size=0.05)
    cam = Camera(32, 32, 30, 30, 16, 16, np.eye(4))
    st = sr.RenderSettings(backend=backend, background=(0.1, 0.2, 0.3))
    img = sr.render_image(scene, cam, st)
    np.testing.assert_allclose(img[0, 0], [0.1, 0.2, 0.3])


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_opaque_gaussian_color(backend):
    color = [0.2, 0.7, 0.4]
    scene = flat_scene([2.0], [color])
    cam = Camera(16, 16, 20, 20, 8, 8, np.eye(4))
    img = sr.render_image(scene, cam, sr.RenderSettings(backend=backend))
    # alpha' is capped at 0.99, so one layer reaches 99% of its color
    assert np.max(np.abs(img[8, 8] - np.array(color))) < 0.01 * max(color) + 1 / 255


def _composite_oracle(scene, cam, x, y, settings):
    """Direct evaluation of the front-to-back compositing sum at one pixel."""
    order = np.argsort(cam.to_camera(scene.means)[:, 2], kind="stable")
    T, C = 1.0, np.zeros(3)
    for i in order:
        p = cam.to_camera(scene.means[i:i + 1])[0]
        Jx = np.array([[cam.fx / p[2], 0, -cam.fx * p[0] / p[2] ** 2],
                       [0, cam.fy / p[2], -cam.fy * p[1] / p[2] ** 2]])
        Rw = cam.world_to_cam[:3, :3]
        R = scene.rotations[i]
        cov = Jx @ Rw @ R @ np.diag(scene.scales[i] ** 2) @ R.T @ Rw.T @ Jx.T + settings.dilation * np.eye(2)
        mu = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
        d = np.array([x, y]) - mu
        a = min(settings.alpha_max, scene.opacities[i] * math.exp(-0.5 * d @ np.linalg.solve(cov, d)))
        if a < settings.alpha_min:
            continue
        color = np.clip(SH_C0 * scene.sh[i, 0] + 0.5, 0, 1)
        C += color * a * T
        T *= 1 - a
        if T < settings.t_min:
            break
    return C + T * np.asarray(settings.background)


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_overlapping_gaussians_match_oracle(backend):
    scene = Scene(np.array([[0.05, 0.0, 2.0], [-0.1, 0.05, 2.6]]), np.log([[0.2, 0.15, 0.1], [0.3, 0.25, 0.2]]),
                  np.array([[1.0, 0, 0, 0], [0.9, 0.1, 0.3, 0.0]]), np.array([0.2, 1.0]),
                  np.array([[[0.5, -0.3, 0.1]], [[-0.4, 0.6, 0.2]]]))
    scene.quats[:] = scene.quats / np.linalg.norm(scene.quats, axis=1, keepdims=True)
    cam = Camera(24, 24, 30, 30, 12, 12, np.eye(4))
    st = sr.RenderSettings(backend=backend)
    img = sr.render_image(scene, cam, st)
    for x, y in [(12, 12), (10, 13), (15, 9), (4, 20)]:
        np.testing.assert_allclose(img[y, x], _composite_oracle(scene, cam, x, y, st), atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_flat_gaussian_depth(backend):
    scene = flat_scene([2.0], [[0.5, 0.5, 0.5]])
    cam = Camera(16, 16, 20, 20, 8, 8, np.eye(4))
    dm = sr.render_depth(scene, cam, sr.RenderSettings(backend=backend))
    cov = dm.covered()
    assert cov.sum() > 100
    assert np.max(np.abs(dm.depth[cov] - 2.0)) < 1e-3


@pytest.mark.parametrize("backend", BACKENDS)
def test_no_gaussians_in_frustum_gives_zero_depth(backend):
    scene = flat_scene([-3.0], [[0.5, 0.5, 0.5]])
    cam = Camera(16, 16, 20, 20, 8, 8, np.eye(4))
    dm = sr.render_depth(scene, cam, sr.RenderSettings(backend=backend))
    assert np.all(dm.depth == 0) and np.all(dm.acc_alpha == 0)


@pytest.mark.parametrize("estimator", ["median", "expected"])
def test_near_opaque_layer_hides_far_layer(estimator):
    scene = flat_scene([1.0, 3.0], [[1, 0, 0], [0, 0, 1]])
    cam = Camera(16, 16, 20, 20, 8, 8, np.eye(4))
    dm = sr.render_depth(scene, cam, sr.RenderSettings(depth_estimator=estimator))
    # expected depth keeps 1% of the far layer (alpha is capped at 0.99)
    tol = 1e-9 if estimator == "median" else 0.02 * 2.0 + 1e-6
    assert abs(dm.depth[8, 8] - 1.0) <= tol


@pytest.mark.parametrize("backend", BACKENDS)
def test_ray_depth_on_tilted_flat_gaussian(backend):
    # a flat Gaussian through (0, 0, 2) with normal n: covered pixels should report
    # the ray-plane intersection depth, not the center depth
    n = np.array([0.3, -0.2, 1.0])
    n /= np.linalg.norm(n)
    t1 = np.cross(n, [1.0, 0, 0])
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    R = np.stack([t1, t2, n], axis=1)
    scene = Scene(np.array([[0.0, 0.0, 2.0]]), np.log([[3.0, 3.0, 1e-4]]), rotmat_to_quat(R[None]),
                  np.array([12.0]), np.zeros((1, 1, 3)))
    cam = Camera(16, 16, 20, 20, 8, 8, np.eye(4))
    dm = sr.render_depth(scene, cam, sr.RenderSettings(backend=backend))
    ys, xs = np.nonzero(dm.covered())
    rays = cam.pixel_rays(np.stack([xs, ys], axis=1).astype(float))
    t = (n @ np.array([0, 0, 2.0])) / (rays @ n)
    z_true = t * rays[:, 2]
    assert np.max(np.abs(dm.depth[ys, xs] - z_true)) < 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
def test_render_is_deterministic(backend):
    scene = random_scene(7, n=40, spread=0.5)
    cam = front_camera(32)
    st = sr.RenderSettings(backend=backend)
    a, b = sr.render(scene, cam, st), sr.render(scene, cam, st)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.depth.depth.tobytes() == b.depth.depth.tobytes()


def test_transmittance_bounds():
    out = sr.render(random_scene(8, n=60, spread=0.4), front_camera(32))
    assert np.all((out.final_t >= 0) & (out.final_t <= 1))
    assert np.all((out.depth.acc_alpha >= 0) & (out.depth.acc_alpha <= 1 + 1e-12))


def test_acc_alpha_monotone_in_opacity():
    scene = random_scene(9, n=20, spread=0.3)
    cam = front_camera(24)
    base = sr.render_depth(scene, cam).acc_alpha
    for i in range(len(scene)):
        s = scene.copy()
        s.opacity_logits[i] += 0.5
        assert np.all(sr.render_depth(s, cam).acc_alpha >= base - 1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels unavailable")
@pytest.mark.parametrize("estimator", ["median", "expected"])
def test_backends_agree(estimator):
    scene = random_scene(21, n=60, sh_coeffs=4, spread=0.5)
    cam = Camera(40, 36, 35, 35, 20, 18, look_at([0.4, -0.3, -3.0], [0, 0, 0], [0, -1, 0]))
    grad = np.random.default_rng(0).normal(size=(36, 40, 3))
    outs = {}
    for b in BACKENDS:
        st = sr.RenderSettings(backend=b, depth_estimator=estimator)
        out = sr.render(scene, cam, st)
        outs[b] = (out, sr.backward_render(scene, cam, grad, st, out))
    (oa, ga), (ob, gb) = outs["python"], outs["cython"]
    np.testing.assert_allclose(oa.image, ob.image, atol=1e-12)
    np.testing.assert_allclose(oa.depth.depth, ob.depth.depth, atol=1e-12)
    np.testing.assert_allclose(oa.depth.acc_alpha, ob.depth.acc_alpha, atol=1e-12)
    np.testing.assert_array_equal(oa.n_contrib, ob.n_contrib)
    for k, v in ga.as_dict().items():
        np.testing.assert_allclose(v, gb.as_dict()[k], atol=1e-10, rtol=1e-9)


# -- backward ----------------------------------------------------------------

def test_zero_upstream_gradient():
    scene = random_scene(2)
    g = sr.backward_render(scene, front_camera(), np.zeros((16, 16, 3)))
    for v in g.as_dict().values():
        assert np.all(v == 0)


def test_culled_gaussian_has_zero_gradient():
    scene = random_scene(2, n=4)
    scene.means[3] = [0.0, 0.0, -10.0]    # behind the camera at z = -3
    g = sr.backward_render(scene, front_camera(), np.ones((16, 16, 3)))
    for v in g.as_dict().values():
        assert np.all(v[3] == 0)


FIELDS = [("means", "mean"), ("log_scales", "log_scale"), ("quats", "rot"),
          ("opacity_logits", "opacity_logit"), ("sh", "sh")]


def render_fd_errors(seed, backend, alpha_min, n=5, h=1e-4):
    """Relative errors of every analytic partial against central differences, with a
    flag marking coordinates where the step crosses a compositing cutoff (the two
    one-sided differences disagree)."""
    rng = np.random.default_rng(seed)
    scene = random_scene(seed, n=n, sh_coeffs=4)
    cam = front_camera(16)
    G = rng.normal(size=(16, 16, 3))
    st = sr.RenderSettings(backend=backend, alpha_min=alpha_min)
    g = sr.backward_render(scene, cam, G, st)
    f = lambda: float(np.sum(G * sr.render_image(scene, cam, st)))
    base = f()
    errs, jumps = [], []
    for name, gname in FIELDS:
        arr, an = getattr(scene, name), getattr(g, gname)
        for ix in np.ndindex(arr.shape):
            fd = central_difference(f, arr, ix, h)
            old = arr[ix]
            arr[ix] = old + h
            fwd = (f() - base) / h
            arr[ix] = old - h
            bwd = (base - f()) / h
            arr[ix] = old
            errs.append(rel_err(fd, an[ix], 1e-5))
            jumps.append(abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd), 1e-3))
    return np.array(errs), np.array(jumps)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences_without_cutoff(backend, seed):
    errs, _ = render_fd_errors(seed, backend, alpha_min=0.0)
    assert errs.max() < 1e-3


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_with_default_cutoff(seed):
    # every mismatch must sit on a coordinate whose step crosses the 1/255 cutoff
    errs, jumps = render_fd_errors(seed, None, alpha_min=1 / 255)
    assert np.all(jumps[errs >= 1e-3])
    assert np.mean(errs < 1e-3) > 0.9


def test_sh_degree_one_color_changes_with_view():
    scene = random_scene(4, n=1, sh_coeffs=4)
    scene.means[:] = 0
    c1, _ = sr.sh_colors(scene.sh, scene.means, np.array([0, 0, -3.0]))
    c2, _ = sr.sh_colors(scene.sh, scene.means, np.array([3.0, 0, 0]))
    assert not np.allclose(c1, c2)
    c0, _ = sr.sh_colors(scene.sh[:, :1], scene.means, np.array([0, 0, -3.0]))
    np.testing.assert_allclose(c0[0], np.clip(SH_C0 * scene.sh[0, 0] + 0.5, 0, 1))


def test_png_round_trip(tmp_path, rng):
    img = rng.random((8, 10, 3))
    sr.save_png(img, tmp_path / "a.png")
    back = sr.load_png(tmp_path / "a.png")
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_depth_map_save_load(tmp_path):
    dm = sr.render_depth(flat_scene([2.0], [[0.5, 0.5, 0.5]]), Camera(16, 12, 20, 20, 8, 6, np.eye(4)))
    dm.save(tmp_path / "d.bin")
    back = sr.DepthMap.load(tmp_path / "d.bin")
    np.testing.assert_allclose(back.depth, dm.depth.astype(np.float32))
    assert back.width == 16 and back.height == 12
