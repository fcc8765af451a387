"""Image metrics (PSNR, SSIM), geometry metrics (Chamfer, Hausdorff) and report emission."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .mesh import MeshError, TriangleMesh

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, return_flag: bool = False):
    """PSNR in dB for images in [0, 1]; identical images give the 99 dB cap."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    identical = mse == 0.0
    value = PSNR_CAP if identical else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
    return (value, identical) if return_flag else value


def _gauss_window():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-x * x / (2 * SSIM_SIGMA**2))
    return w / w.sum()


def _filt(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, valid region only."""
    w = _gauss_window()
    r = SSIM_WINDOW // 2
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _filt_adjoint(g: np.ndarray, shape) -> np.ndarray:
    w = _gauss_window()
    r = SSIM_WINDOW // 2
    full = np.zeros(shape)
    full[r:-r, r:-r] = g
    out = correlate1d(full, w[::-1], axis=0, mode="constant")
    return correlate1d(out, w[::-1], axis=1, mode="constant")


def _ssim_channel(x: np.ndarray, y: np.ndarray, need_grad: bool):
    mx, my = _filt(x), _filt(y)
    exx, eyy, exy = _filt(x * x), _filt(y * y), _filt(x * y)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1, a2 = 2 * mx * my + SSIM_C1, 2 * sxy + SSIM_C2
    b1, b2 = mx * mx + my * my + SSIM_C1, sxx + syy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    if not need_grad:
        return smap.mean(), None
    up = 1.0 / smap.size
    g_a1 = up * a2 / (b1 * b2)
    g_a2 = up * a1 / (b1 * b2)
    g_b1 = -up * smap / b1
    g_b2 = -up * smap / b2
    g_mx = 2 * my * g_a1 - 2 * my * g_a2 + 2 * mx * g_b1 - 2 * mx * g_b2
    g_exy = 2 * g_a2
    g_exx = g_b2
    shape = x.shape
    grad = _filt_adjoint(g_mx, shape) + 2 * x * _filt_adjoint(g_exx, shape) + y * _filt_adjoint(g_exy, shape)
    return smap.mean(), grad


def _as_channels(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) on the channel-mean gray image."""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    ga = _as_channels(a).mean(axis=-1)
    gb = _as_channels(b).mean(axis=-1)
    return float(_ssim_channel(ga, gb, False)[0])


def ssim_rgb_with_grad(a, b):
    """Per-channel SSIM averaged over channels, and its gradient w.r.t. ``a``."""
    a, b = _check_pair(a, b)
    a3, b3 = _as_channels(a), _as_channels(b)
    total = 0.0
    grad = np.zeros_like(a3)
    nc = a3.shape[-1]
    for c in range(nc):
        s, g = _ssim_channel(a3[..., c], b3[..., c], True)
        total += s / nc
        grad[..., c] = g / nc
    return total, grad.reshape(a.shape)


# ---------------------------------------------------------------------------
# geometry

def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points to triangles (broadcast over leading axes)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        closest = a + v_in[..., None] * ab + w_in[..., None] * ac
        # region tests in reverse priority so the first matching region wins
        cond_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest = np.where(cond_bc[..., None], b + t_bc[..., None] * (c - b), closest)
        cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest = np.where(cond_ac[..., None], a + t_ac[..., None] * ac, closest)
        cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest = np.where(cond_ab[..., None], a + t_ab[..., None] * ab, closest)
        cond_c = (d6 >= 0) & (d5 <= d6)
        closest = np.where(cond_c[..., None], c, closest)
        cond_b = (d3 >= 0) & (d4 <= d3)
        closest = np.where(cond_b[..., None], b, closest)
        cond_a = (d1 <= 0) & (d2 <= 0)
        closest = np.where(cond_a[..., None], a, closest)
    bad = ~np.all(np.isfinite(closest), axis=-1)
    if np.any(bad):  # degenerate triangles: fall back to nearest vertex
        dv = np.stack([np.linalg.norm(p - a, axis=-1), np.linalg.norm(p - b, axis=-1),
                       np.linalg.norm(p - c, axis=-1)])
        out = np.linalg.norm(np.where(bad[..., None], p, p - closest), axis=-1)
        return np.where(bad, dv.min(axis=0), out)
    return np.linalg.norm(p - closest, axis=-1)


class MeshDistance:
    """Point-to-mesh distance with candidate triangles from a centroid kd-tree."""

    def __init__(self, mesh: TriangleMesh, k: int = 24):
        if mesh.n_faces == 0:
            raise MeshError("empty mesh")
        self.tri = mesh.vertices[mesh.faces]
        cent = self.tri.mean(axis=1)
        self.tree = cKDTree(cent)
        self.k = min(k, mesh.n_faces)

    def __call__(self, points: np.ndarray, chunk: int = 20000) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            p = points[s:s + chunk]
            _, idx = self.tree.query(p, k=self.k)
            idx = np.asarray(idx).reshape(len(p), self.k)
            t = self.tri[idx]
            d = point_triangle_distance(p[:, None, :], t[:, :, 0], t[:, :, 1], t[:, :, 2])
            out[s:s + chunk] = d.min(axis=1)
        return out


def chamfer_hausdorff(mesh: TriangleMesh, reference, n_samples: int = 10000, seed: int = 0):
    """Two-sided (Chamfer, Hausdorff) between ``mesh`` and a mesh or analytic surface.

    Chamfer is the mean of the two directed mean distances, Hausdorff the max of
    the two directed maxima.  An analytic reference is any callable SDF; when it
    also has ``sample(n, rng)`` the reference-to-mesh direction is included,
    otherwise only mesh-to-reference distances are used.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    if mesh.n_faces == 0:
        raise MeshError("cannot measure an empty mesh")
    rng = np.random.default_rng(seed)
    pts, _ = mesh.sample_surface(n_samples, rng)
    if isinstance(reference, TriangleMesh):
        d_ab = MeshDistance(reference)(pts)
        ref_pts, _ = reference.sample_surface(n_samples, rng)
        d_ba = MeshDistance(mesh)(ref_pts)
    else:
        d_ab = np.abs(reference(pts))
        if hasattr(reference, "sample"):
            ref_pts, _ = reference.sample(n_samples, rng)
            d_ba = MeshDistance(mesh)(ref_pts)
        else:
            d_ba = d_ab
    chamfer = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    hausdorff = max(float(d_ab.max()), float(d_ba.max()))
    return chamfer, hausdorff


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricReport:
    views: list = field(default_factory=list)      # [{"view": i, "psnr": .., "ssim": .., "identical": ..}]
    geometry: dict = field(default_factory=dict)   # {"chamfer": .., "hausdorff": ..}
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    lpips: None = None

    def summary(self) -> dict:
        out = {}
        if self.views:
            out["psnr_mean"] = float(np.mean([v["psnr"] for v in self.views]))
            out["ssim_mean"] = float(np.mean([v["ssim"] for v in self.views]))
        out.update(self.geometry)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim", "identical"])
            for v in self.views:
                w.writerow([v["view"], f"{v['psnr']:.6f}", f"{v['ssim']:.6f}", int(v["identical"])])


def image_report(renders, targets) -> list[dict]:
    rows = []
    for i, (a, b) in enumerate(zip(renders, targets)):
        p, same = psnr(a, b, return_flag=True)
        rows.append({"view": i, "psnr": p, "ssim": ssim(a, b), "identical": same})
    return rows
