"""CPU reference rasterizer for 3D Gaussian splats: color, depth and the analytic adjoint."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from ._geometry import covariance, covariance_vjp, quat_to_rotmat, quat_to_rotmat_vjp, SCALE_FLOOR
from .scene_io import SH_C0, Camera, Scene

SH_C1 = 0.4886025119029199


@dataclass
class RenderSettings:
    tile_size: int = 16
    near: float = 0.01
    dilation: float = 0.3
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    alpha_max: float = 0.99
    background: tuple = (0.0, 0.0, 0.0)
    coverage: float = 0.5
    backend: str | None = None
    threads: int = 1
    depth_mode: str = "ray"   # "ray": per-pixel peak along the ray; "center": splat center depth
    depth_estimator: str = "median"   # "median": where T falls below 1/2; "expected": alpha-weighted mean


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float


@dataclass
class DepthMap:
    depth: np.ndarray      # (H, W), 0 where not covered
    acc_alpha: np.ndarray  # (H, W)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    def covered(self, threshold: float = 0.5) -> np.ndarray:
        return self.acc_alpha >= threshold

    def save(self, path) -> None:
        """Write ``<path>`` (float32 depth then acc_alpha, row-major) and ``<path>.json``."""
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(self.depth.astype("<f4").tobytes())
            fh.write(self.acc_alpha.astype("<f4").tobytes())
        with open(str(path) + ".json", "w") as fh:
            json.dump({"width": self.width, "height": self.height, "dtype": "float32-le",
                       "layers": ["depth", "acc_alpha"]}, fh)

    @classmethod
    def load(cls, path) -> "DepthMap":
        with open(str(path) + ".json") as fh:
            hdr = json.load(fh)
        raw = np.fromfile(path, dtype="<f4").astype(np.float64)
        h, w = hdr["height"], hdr["width"]
        return cls(raw[: h * w].reshape(h, w), raw[h * w:].reshape(h, w))


@dataclass
class SceneGrads:
    mean: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros_like(cls, scene: Scene) -> "SceneGrads":
        n = len(scene)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros_like(scene.sh))

    def __add__(self, other: "SceneGrads") -> "SceneGrads":
        return SceneGrads(self.mean + other.mean, self.log_scale + other.log_scale,
                          self.rot + other.rot, self.opacity_logit + other.opacity_logit,
                          self.sh + other.sh)

    def scaled(self, w: float) -> "SceneGrads":
        return SceneGrads(self.mean * w, self.log_scale * w, self.rot * w,
                          self.opacity_logit * w, self.sh * w)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "log_scale": self.log_scale, "rot": self.rot,
                "opacity_logit": self.opacity_logit, "sh": self.sh}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


# ---------------------------------------------------------------------------
# color

def sh_colors(sh: np.ndarray, means: np.ndarray, cam_center: np.ndarray):
    """RGB from SH bands 0 and 1; higher bands are carried but not evaluated.

    Returns ``(colors, raw)`` where ``raw`` is the unclamped value.
    """
    raw = SH_C0 * sh[:, 0] + 0.5
    if sh.shape[1] >= 4:
        d = means - cam_center
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        raw = raw + SH_C1 * (-y * sh[:, 1] + z * sh[:, 2] - x * sh[:, 3])
    return np.clip(raw, 0.0, 1.0), raw


def sh_colors_vjp(sh, means, cam_center, raw, d_colors):
    d_raw = np.where((raw > 0.0) & (raw < 1.0), d_colors, 0.0)
    d_sh = np.zeros_like(sh)
    d_means = np.zeros_like(means)
    d_sh[:, 0] = SH_C0 * d_raw
    if sh.shape[1] >= 4:
        v = means - cam_center
        nrm = np.linalg.norm(v, axis=1, keepdims=True)
        d = v / nrm
        x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
        d_sh[:, 1] = -SH_C1 * y * d_raw
        d_sh[:, 2] = SH_C1 * z * d_raw
        d_sh[:, 3] = -SH_C1 * x * d_raw
        d_dir = SH_C1 * np.stack([-(sh[:, 3] * d_raw).sum(1), -(sh[:, 1] * d_raw).sum(1),
                                  (sh[:, 2] * d_raw).sum(1)], axis=1)
        d_means = (d_dir - np.sum(d_dir * d, axis=1, keepdims=True) * d) / nrm
    return d_sh, d_means


# ---------------------------------------------------------------------------
# projection

@dataclass
class Projection:
    visible: np.ndarray   # (N,) bool
    p_cam: np.ndarray     # (N, 3)
    mean2d: np.ndarray    # (N, 2)
    cov2d: np.ndarray     # (N, 2, 2) dilated
    conic: np.ndarray     # (N, 3) inverse of cov2d as (a, b, c)
    J: np.ndarray         # (N, 2, 3)
    M: np.ndarray         # (N, 3, 3) camera-frame covariance
    radius: np.ndarray    # (N,) pixels
    rect: np.ndarray      # (N, 4) tile rect x0, y0, x1, y1 (exclusive)


def project(means: np.ndarray, covs: np.ndarray, cam: Camera,
            settings: RenderSettings = DEFAULT_SETTINGS) -> Projection:
    W = cam.rotation
    p_cam = means @ W.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    front = z > settings.near
    zs = np.where(front, z, 1.0)
    J = np.zeros((len(means), 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    M = W @ covs @ W.T
    cov2d = J @ M @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    det = np.where(det > 0, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radius = np.ceil(3.0 * np.sqrt(lam))
    ts = settings.tile_size
    tiles_x = (cam.width + ts - 1) // ts
    tiles_y = (cam.height + ts - 1) // ts
    with np.errstate(invalid="ignore"):
        rect = np.stack([
            np.clip(np.floor((mean2d[:, 0] - radius) / ts), 0, tiles_x),
            np.clip(np.floor((mean2d[:, 1] - radius) / ts), 0, tiles_y),
            np.clip(np.floor((mean2d[:, 0] + radius + ts - 1) / ts), 0, tiles_x),
            np.clip(np.floor((mean2d[:, 1] + radius + ts - 1) / ts), 0, tiles_y),
        ], axis=1).astype(np.int64)
    visible = front & (rect[:, 2] > rect[:, 0]) & (rect[:, 3] > rect[:, 1]) & np.all(np.isfinite(mean2d), axis=1)
    return Projection(visible, p_cam, mean2d, cov2d, conic, J, M, radius, rect)


def project_gaussian(g, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS):
    """Project one Gaussian3D; ``None`` when culled."""
    cov = g.covariance[None]
    pr = project(np.asarray(g.mean, dtype=np.float64)[None], cov, cam, settings)
    if not pr.visible[0]:
        return None
    color, _ = sh_colors(np.asarray(g.sh, dtype=np.float64).reshape(1, -1, 3),
                         np.asarray(g.mean, dtype=np.float64)[None], cam.center)
    return Splat2D(pr.mean2d[0], pr.cov2d[0], float(pr.p_cam[0, 2]), color[0], g.opacity)


def bin_tiles(proj: Projection, cam: Camera, settings: RenderSettings):
    """CSR lists of visible Gaussians per tile, each list sorted front to back.

    One global depth sort per frame; ties resolved by Gaussian index.
    """
    ts = settings.tile_size
    tiles_x = (cam.width + ts - 1) // ts
    tiles_y = (cam.height + ts - 1) // ts
    vis = np.flatnonzero(proj.visible)
    order = vis[np.lexsort((vis, proj.p_cam[vis, 2]))]
    r = proj.rect[order]
    wx = r[:, 2] - r[:, 0]
    wy = r[:, 3] - r[:, 1]
    counts = wx * wy
    total = int(counts.sum())
    gid = np.repeat(order, counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    wxr = np.repeat(wx, counts)
    tx = np.repeat(r[:, 0], counts) + local % np.maximum(wxr, 1)
    ty = np.repeat(r[:, 1], counts) + local // np.maximum(wxr, 1)
    tile = ty * tiles_x + tx
    perm = np.argsort(tile, kind="stable")
    tile_ids = gid[perm].astype(np.int64)
    tile_ptr = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=tile_ptr[1:])
    return tile_ptr, tile_ids


@dataclass
class RenderOutput:
    image: np.ndarray
    depth: DepthMap
    final_t: np.ndarray
    n_contrib: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def depth_coefficients(proj: Projection, cam: Camera, mode: str = "ray") -> np.ndarray:
    """Per-splat (N, 10) table the kernels turn into a per-pixel depth.

    Column 0 is the center depth.  For ``mode="ray"`` the rest encode the depth
    of the density peak along the pixel ray, ``z = b.q / (q^T P q)`` with
    ``q = (u, v, 1)``; for a flat Gaussian this is the ray-plane intersection.
    A non-positive denominator falls back to the center depth.
    """
    n = len(proj.p_cam)
    out = np.zeros((n, 10))
    out[:, 0] = proj.p_cam[:, 2]
    if mode == "center" or n == 0:
        return out
    if mode != "ray":
        raise ValueError(f"unknown depth mode {mode!r}")
    try:
        P = np.linalg.inv(proj.M)
    except np.linalg.LinAlgError:
        return out
    A = np.array([[1.0 / cam.fx, 0.0, -cam.cx / cam.fx], [0.0, 1.0 / cam.fy, -cam.cy / cam.fy], [0.0, 0.0, 1.0]])
    b = np.einsum("ji,njk,nk->ni", A, P, proj.p_cam)
    Q = np.einsum("ji,njk,kl->nil", A, P, A)
    out[:, 1:4] = b
    out[:, 4:10] = Q[:, [0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2]]
    bad = ~np.all(np.isfinite(out), axis=1)
    out[bad, 1:] = 0.0
    return out


def render_gaussians(means, covs, opacities, colors, cam: Camera,
                     settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Rasterize explicit world-space Gaussians (colors already evaluated)."""
    k = _backend.get_kernels(settings.backend)
    proj = project(means, covs, cam, settings)
    tile_ptr, tile_ids = bin_tiles(proj, cam, settings)
    bg = np.ascontiguousarray(settings.background, dtype=np.float64)
    args = (tile_ptr, tile_ids, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
            np.ascontiguousarray(opacities, dtype=np.float64), np.ascontiguousarray(colors, dtype=np.float64),
            np.ascontiguousarray(depth_coefficients(proj, cam, settings.depth_mode)), int(cam.width), int(cam.height),
            int(settings.tile_size), bg, float(settings.alpha_min), float(settings.t_min),
            float(settings.alpha_max))
    image, acc, depth_num, depth_med, final_t, n_contrib = k.forward(*args, n_threads=int(settings.threads))
    covered = acc >= settings.coverage
    if settings.depth_estimator == "median":
        depth = np.where(covered, depth_med, 0.0)
    elif settings.depth_estimator == "expected":
        depth = np.where(covered, depth_num / np.maximum(acc, 1e-12), 0.0)
    else:
        raise ValueError(f"unknown depth estimator {settings.depth_estimator!r}")
    return RenderOutput(image, DepthMap(depth, acc), final_t, n_contrib,
                        cache={"proj": proj, "args": args, "kernels": k})


def backward_gaussians(out: RenderOutput, cam: Camera, grad_image: np.ndarray):
    """Adjoint of :func:`render_gaussians` for the color image.

    Returns gradients w.r.t. ``(means, covs, opacities, colors)``.
    """
    proj: Projection = out.cache["proj"]
    k = out.cache["kernels"]
    args = out.cache["args"]
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    d_mean2d, d_conic, d_opac, d_color = k.backward(*args, out.final_t, out.n_contrib, grad_image)
    vis = proj.visible
    n = len(vis)
    d_means = np.zeros((n, 3))
    d_covs = np.zeros((n, 3, 3))
    if not np.any(vis):
        return d_means, d_covs, d_opac, d_color
    A = np.zeros((n, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    GA = np.zeros((n, 2, 2))
    GA[:, 0, 0] = d_conic[:, 0]
    GA[:, 0, 1] = GA[:, 1, 0] = 0.5 * d_conic[:, 1]
    GA[:, 1, 1] = d_conic[:, 2]
    G_cov2d = -A @ GA @ A
    J, M = proj.J, proj.M
    Jt = np.swapaxes(J, 1, 2)
    dM = Jt @ G_cov2d @ J
    dJ = 2.0 * G_cov2d @ J @ M
    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], np.where(vis, proj.p_cam[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    dp = np.zeros((n, 3))
    dp[:, 0] = d_mean2d[:, 0] * fx / z + dJ[:, 0, 2] * (-fx / z**2)
    dp[:, 1] = d_mean2d[:, 1] * fy / z + dJ[:, 1, 2] * (-fy / z**2)
    dp[:, 2] = (d_mean2d[:, 0] * (-fx * x / z**2) + d_mean2d[:, 1] * (-fy * y / z**2)
                + dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * (2 * fx * x / z**3)
                + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * (2 * fy * y / z**3))
    W = cam.rotation
    d_means = dp @ W
    d_covs = W.T @ dM @ W
    mask = vis.astype(np.float64)
    return d_means * mask[:, None], d_covs * mask[:, None, None], d_opac * mask, d_color * mask[:, None]


# ---------------------------------------------------------------------------
# scene-level API

def _scene_world(scene: Scene):
    R = quat_to_rotmat(scene.quats)
    s = scene.scales
    return R, s, covariance(R, s)


def render(scene: Scene, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    if len(scene) == 0:
        raise ValueError("cannot render an empty scene")
    R, s, covs = _scene_world(scene)
    colors, raw = sh_colors(scene.sh, scene.means, cam.center)
    out = render_gaussians(scene.means, covs, scene.opacities, colors, cam, settings)
    out.cache.update(R=R, scales=s, color_raw=raw)
    return out


def render_image(scene: Scene, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> np.ndarray:
    return render(scene, cam, settings).image


def render_depth(scene: Scene, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS) -> DepthMap:
    return render(scene, cam, settings).depth


def backward_render(scene: Scene, cam: Camera, loss_grad: np.ndarray,
                    settings: RenderSettings = DEFAULT_SETTINGS,
                    out: RenderOutput | None = None) -> SceneGrads:
    """Exact gradient of ``sum(loss_grad * render_image(scene, cam))`` w.r.t. the scene."""
    if out is None:
        out = render(scene, cam, settings)
    d_means, d_covs, d_opac, d_color = backward_gaussians(out, cam, loss_grad)
    R, s = out.cache["R"], out.cache["scales"]
    dR, ds = covariance_vjp(R, s, d_covs)
    d_quat = quat_to_rotmat_vjp(scene.quats, dR)
    d_log_scale = ds * s * (np.exp(scene.log_scales) > SCALE_FLOOR)
    d_sh, d_means_color = sh_colors_vjp(scene.sh, scene.means, cam.center, out.cache["color_raw"], d_color)
    alpha = scene.opacities
    return SceneGrads(d_means + d_means_color, d_log_scale, d_quat, d_opac * alpha * (1 - alpha), d_sh)


def save_png(image: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
