"""Oriented points on a density level set, found along camera rays through depth-map pixels."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .density_field import GaussianCache, NeighborIndex, evaluate, rebuild_index
from .ply import read_ply, write_ply
from .scene_io import Camera, Scene
from .splat_render import DEFAULT_SETTINGS, RenderSettings, render_depth


class EmptyCloudError(RuntimeError):
    pass


@dataclass
class LevelSetConfig:
    lam: float = 0.3
    n_rays_per_view: int = 2000
    n_samples_per_ray: int = 21
    sigma_span: float = 3.0
    rel_tol: float = 1e-3
    max_refine: int = 8
    seed: int = 0
    render: RenderSettings = field(default_factory=RenderSettings)

    def validate(self) -> None:
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.n_samples_per_ray < 2:
            raise ValueError("n_samples_per_ray must be at least 2")
        if not self.sigma_span > 0:
            raise ValueError("sigma_span must be positive")
        if self.n_rays_per_view < 1:
            raise ValueError("n_rays_per_view must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray
    view_id: np.ndarray
    level: float = 0.0
    tolerance: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.view_id = np.asarray(self.view_id, dtype=np.int64).reshape(-1)
        if not (len(self.points) == len(self.normals) == len(self.view_id)):
            raise ValueError("points, normals and view_id must have equal length")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask) -> "OrientedPointCloud":
        return OrientedPointCloud(self.points[mask], self.normals[mask], self.view_id[mask],
                                  self.level, self.tolerance)

    def save_ply(self, path) -> None:
        p, n = self.points, self.normals
        props = {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2],
                 "nx": n[:, 0], "ny": n[:, 1], "nz": n[:, 2]}
        write_ply(path, {"vertex": {k: v.astype(np.float32) for k, v in props.items()}})

    @classmethod
    def load_ply(cls, path) -> "OrientedPointCloud":
        v = read_ply(path)["vertex"]
        pts = np.stack([v["x"], v["y"], v["z"]], axis=1)
        nrm = np.stack([v["nx"], v["ny"], v["nz"]], axis=1)
        return cls(pts, nrm, np.zeros(len(pts), dtype=np.int64))


def directional_std(cov: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Standard deviation of a Gaussian along unit direction(s) ``v``."""
    return np.sqrt(np.einsum("...i,...ij,...j->...", v, cov, v))


def _crossings(p, v, g, cache: GaussianCache, index, lam, n, span, rel_tol, max_refine):
    """Vectorized level crossing along M rays.

    Returns (points, normals, ok).  Samples are taken at ascending t, so the first
    bracket is the one closest to the camera.
    """
    m = len(p)
    cov = np.einsum("mij,mj,mkj->mik", cache.R[g], cache.scales[g] ** 2, cache.R[g])
    sig = directional_std(cov, v)
    u = np.linspace(-1.0, 1.0, n)
    t = (span * sig)[:, None] * u[None, :]
    pts = p[:, None, :] + t[..., None] * v[:, None, :]
    f = evaluate(pts.reshape(-1, 3), cache, index).d.reshape(m, n) - lam
    sgn = f >= 0
    br = sgn[:, :-1] != sgn[:, 1:]
    has = br.any(axis=1)
    i0 = np.argmax(br, axis=1)
    rows = np.arange(m)
    ta, tb = t[rows, i0], t[rows, i0 + 1]
    fa, fb = f[rows, i0], f[rows, i0 + 1]
    tol = rel_tol * lam

    def interp(ta, tb, fa, fb):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = ta - fa * (tb - ta) / (fb - fa)
        return np.where(np.isfinite(tc), tc, 0.5 * (ta + tb))

    tc = interp(ta, tb, fa, fb)
    ev = evaluate(p + tc[:, None] * v, cache, index)
    fc = ev.d - lam
    side = np.zeros(m, dtype=np.int8)   # Illinois: which end was kept last time
    for _ in range(max_refine):
        todo = has & (np.abs(fc) > tol)
        if not todo.any():
            break
        left = (np.sign(fc) == np.sign(fa)) & todo   # crossing is in [tc, tb]
        right = todo & ~left
        fb = np.where(left & (side == 1), 0.5 * fb, fb)
        fa = np.where(right & (side == -1), 0.5 * fa, fa)
        ta, fa = np.where(left, tc, ta), np.where(left, fc, fa)
        tb, fb = np.where(right, tc, tb), np.where(right, fc, fb)
        side = np.where(left, 1, np.where(right, -1, side)).astype(np.int8)
        tc_new = interp(ta, tb, fa, fb)
        tc = np.where(todo, tc_new, tc)
        ev_new = evaluate(p[todo] + tc[todo, None] * v[todo], cache, index)
        fc = fc.copy()
        fc[todo] = ev_new.d - lam
        ev.grad_d[todo] = ev_new.grad_d
    grad = ev.grad_d
    gn = np.linalg.norm(grad, axis=1)
    ok = has & (np.abs(fc) <= tol) & (gn > 1e-12)
    normals = grad / np.where(gn > 0, gn, 1.0)[:, None]
    flip = np.einsum("mi,mi->m", normals, v) > 0
    normals[flip] *= -1.0
    return p + tc[:, None] * v, normals, ok


def ray_level_crossing(p, v, g: int, scene: Scene, index: NeighborIndex | None, lam: float,
                       n: int = 21, span: float = 3.0, rel_tol: float = 1e-3, max_refine: int = 8,
                       cache: GaussianCache | None = None):
    """Level crossing closest to the camera on the segment ``p + t v``, |t| <= span * sigma_g(v).

    Returns ``(point, normal)`` or ``None`` when no crossing exists, the residual
    cannot be refined below ``rel_tol * lam`` or the gradient vanishes.
    """
    cache = cache or GaussianCache(scene)
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(1, 3)
    pts, nrm, ok = _crossings(p, v, np.array([g]), cache, index, lam, n, span, rel_tol, max_refine)
    return (pts[0], nrm[0]) if ok[0] else None


def _view_rng(seed: int, cam: Camera) -> np.random.Generator:
    # keyed on the camera itself so dropping one view leaves the others' samples unchanged
    key = zlib.crc32(np.ascontiguousarray(cam.view).tobytes()
                     + np.array([cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height]).tobytes())
    return np.random.default_rng([seed, key])


def sample_level_set(scene: Scene, cams, cfg: LevelSetConfig | None = None,
                     index: NeighborIndex | None = None, stats: dict | None = None) -> OrientedPointCloud:
    """Cast rays through randomly chosen covered pixels of every view and keep the
    refined crossings.  ``stats``, when given, receives the ray and point counts."""
    cfg = cfg or LevelSetConfig()
    cfg.validate()
    index = index or rebuild_index(scene)
    cache = GaussianCache(scene)
    out_p, out_n, out_v = [], [], []
    n_rays = 0
    for vi, cam in enumerate(cams):
        dm = render_depth(scene, cam, cfg.render)
        flat = np.flatnonzero(dm.covered(cfg.render.coverage).reshape(-1))
        if len(flat) == 0:
            continue
        rng = _view_rng(cfg.seed, cam)
        k = min(cfg.n_rays_per_view, len(flat))
        n_rays += k
        pick = np.sort(rng.choice(flat, size=k, replace=False))
        yy, xx = np.divmod(pick, dm.width)
        uv = np.stack([xx, yy], axis=1).astype(np.float64)
        rays = cam.pixel_rays(uv)
        p = cam.center + dm.depth[yy, xx][:, None] * rays
        v = rays / np.linalg.norm(rays, axis=1, keepdims=True)
        g = evaluate(p, cache, index).g_star
        pts, nrm, ok = _crossings(p, v, g, cache, index, cfg.lam, cfg.n_samples_per_ray,
                                  cfg.sigma_span, cfg.rel_tol, cfg.max_refine)
        out_p.append(pts[ok])
        out_n.append(nrm[ok])
        out_v.append(np.full(int(ok.sum()), vi, dtype=np.int64))
    total = sum(len(x) for x in out_p)
    if stats is not None:
        stats.update(n_rays=n_rays, n_points=total)
    if total == 0:
        dmax = float(cache.alpha.max()) if len(scene) else 0.0
        raise EmptyCloudError(
            f"no level-set crossings found for lambda={cfg.lam}; the level is likely too high "
            f"(largest Gaussian opacity is {dmax:.3g}) or no pixel is covered")
    return OrientedPointCloud(np.concatenate(out_p), np.concatenate(out_n), np.concatenate(out_v),
                              cfg.lam, cfg.rel_tol * cfg.lam)


def camera_box(cams) -> tuple[np.ndarray, np.ndarray]:
    c = np.array([cam.center for cam in cams])
    return c.min(axis=0), c.max(axis=0)


def split_fg_bg(cloud: OrientedPointCloud, cams):
    """Foreground: points inside the axis-aligned box of camera centers (inclusive)."""
    if len(cams) == 0:
        raise ValueError("need at least one camera")
    lo, hi = camera_box(cams)
    inside = np.all((cloud.points >= lo) & (cloud.points <= hi), axis=1)
    return cloud.subset(inside), cloud.subset(~inside)
