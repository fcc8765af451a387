"""Flat Gaussians bound to mesh triangles: barycentric means, two in-plane scales and a
complex in-plane rotation; joint refinement of mesh and Gaussians; edit-time rescaling."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._geometry import covariance, covariance_vjp, normalize_vec_vjp, rotmat_to_quat
from .eval_metrics import psnr
from .mesh import MeshError, TriangleMesh
from .ply import read_ply, write_ply
from .regularizer import Adam, TrainingDivergedError, photometric_loss
from .scene_io import Camera, Gaussian3D, Scene, logit
from .splat_render import (DEFAULT_SETTINGS, RenderSettings, backward_gaussians, render_gaussians,
                           sh_colors, sh_colors_vjp)

log = logging.getLogger(__name__)

THIN_FACTOR = 1e-4
DEGENERATE_AREA = 1e-12
ROT_EPS = 1e-12
SUPPORTED_LAYOUTS = (1, 3, 6)
DENSE_MESH_VERTICES = 200_000   # above this, one Gaussian per triangle by default

_warn_counter = {"zero_rotation": 0}


def zero_rotation_warnings() -> int:
    return _warn_counter["zero_rotation"]


def bary_layout(n: int) -> np.ndarray:
    """Fixed barycentric coordinates of the ``n`` Gaussians placed on every triangle."""
    if n == 1:
        return np.full((1, 3), 1.0 / 3.0)
    near_vertex = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    if n == 3:
        return near_vertex
    if n == 6:
        near_edge = np.array([[5 / 12, 5 / 12, 1 / 6], [1 / 6, 5 / 12, 5 / 12], [5 / 12, 1 / 6, 5 / 12]])
        return np.vstack([near_vertex, near_edge])
    raise ValueError(f"unsupported Gaussians-per-triangle count {n}; supported: {SUPPORTED_LAYOUTS}")


# ---------------------------------------------------------------------------
# triangle frames

def _frames(vertices: np.ndarray, faces: np.ndarray, check: bool = True):
    """Per-face rotation [normal, unit(v1 - v0), normal x that] plus the intermediates
    needed by the adjoint."""
    v = vertices[faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    c = np.cross(e1, e2)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    if check and np.any(0.5 * cn[:, 0] <= DEGENERATE_AREA):
        bad = np.flatnonzero(0.5 * cn[:, 0] <= DEGENERATE_AREA)
        raise MeshError(f"degenerate triangle(s) {bad[:5].tolist()} (area <= {DEGENERATE_AREA})")
    e1n = np.linalg.norm(e1, axis=1, keepdims=True)
    r0 = c / cn
    r1 = e1 / e1n
    r2 = np.cross(r0, r1)
    R = np.stack([r0, r1, r2], axis=2)
    return R, (e1, e2, c, cn, e1n, r0, r1)


def triangle_frame(mesh: TriangleMesh, tri_id) -> np.ndarray:
    """Rotation with the unit normal, the first edge direction and their cross product
    as columns (det +1).  Vectorized over an array of face ids."""
    ids = np.atleast_1d(np.asarray(tri_id))
    R, _ = _frames(mesh.vertices, mesh.faces[ids])
    return R[0] if np.ndim(tri_id) == 0 else R


def _frames_vjp(faces, n_vertices, inter, dR):
    e1, e2, c, cn, e1n, r0, r1 = inter
    g0, g1, g2 = dR[:, :, 0], dR[:, :, 1], dR[:, :, 2]
    g0 = g0 + np.cross(r1, g2)
    g1 = g1 + np.cross(g2, r0)
    ge1 = normalize_vec_vjp(r1, e1n, g1)
    gc = normalize_vec_vjp(r0, cn, g0)
    ge1 = ge1 + np.cross(e2, gc)
    ge2 = np.cross(gc, e1)
    dV = np.zeros((n_vertices, 3))
    np.add.at(dV, faces[:, 1], ge1)
    np.add.at(dV, faces[:, 2], ge2)
    np.add.at(dV, faces[:, 0], -ge1 - ge2)
    return dV


def _rot2_unit(rot2: np.ndarray):
    n = np.linalg.norm(rot2, axis=1, keepdims=True)
    zero = n[:, 0] < ROT_EPS
    if np.any(zero):
        _warn_counter["zero_rotation"] += int(zero.sum())
        rot2 = np.where(zero[:, None], [1.0, 0.0], rot2)
        n = np.where(zero[:, None], 1.0, n)
    return rot2 / n, n, zero


def gaussian_rotations(R: np.ndarray, rot2_unit: np.ndarray) -> np.ndarray:
    """R_g = [R0, x R1 + y R2, -y R1 + x R2] for unit (x, y)."""
    x, y = rot2_unit[:, 0:1], rot2_unit[:, 1:2]
    r0, r1, r2 = R[:, :, 0], R[:, :, 1], R[:, :, 2]
    return np.stack([r0, x * r1 + y * r2, -y * r1 + x * r2], axis=2)


# ---------------------------------------------------------------------------
# bound scenes

@dataclass
class BoundGaussian:
    tri_id: int
    bary: np.ndarray
    log_scale2: np.ndarray
    rot2: np.ndarray
    opacity_logit: float
    sh: np.ndarray


@dataclass
class BoundScene:
    mesh: TriangleMesh
    tri_id: np.ndarray          # (M,)
    bary: np.ndarray            # (M, 3), fixed
    log_scale2: np.ndarray      # (M, 2)
    rot2: np.ndarray            # (M, 2) complex number as (x, y)
    opacity_logit: np.ndarray   # (M,)
    sh: np.ndarray              # (M, K, 3)
    n_per_triangle: int
    thin_scale: float

    def __len__(self) -> int:
        return len(self.tri_id)

    @property
    def bound(self) -> list[BoundGaussian]:
        return [BoundGaussian(int(self.tri_id[i]), self.bary[i], self.log_scale2[i], self.rot2[i],
                              float(self.opacity_logit[i]), self.sh[i]) for i in range(len(self))]

    def copy(self) -> "BoundScene":
        return BoundScene(self.mesh.copy(), self.tri_id.copy(), self.bary.copy(), self.log_scale2.copy(),
                          self.rot2.copy(), self.opacity_logit.copy(), self.sh.copy(),
                          self.n_per_triangle, self.thin_scale)

    def world(self):
        """World-space (means, rotations, scales) of every bound Gaussian."""
        means, R_g, scales, _ = _world(self)
        return means, R_g, scales

    def to_scene(self) -> Scene:
        means, R_g, scales = self.world()
        return Scene(means, np.log(scales), rotmat_to_quat(R_g), self.opacity_logit.copy(), self.sh.copy())

    # -- serialization -----------------------------------------------------
    def save(self, prefix) -> None:
        """Write ``<prefix>.mesh.ply`` (float64 vertices), ``<prefix>.bound.bin`` and
        ``<prefix>.bound.json`` (header describing the little-endian float64 table)."""
        prefix = str(prefix)
        m = self.mesh
        write_ply(prefix + ".mesh.ply",
                  {"vertex": {"x": m.vertices[:, 0], "y": m.vertices[:, 1], "z": m.vertices[:, 2]},
                   "face": {"vertex_indices": m.faces.astype(np.int32)}})
        k = self.sh.shape[1]
        cols = [("tri_id", 1), ("bary", 3), ("log_scale2", 2), ("rot2", 2), ("opacity_logit", 1), ("sh", 3 * k)]
        table = np.column_stack([self.tri_id.astype(np.float64), self.bary, self.log_scale2, self.rot2,
                                 self.opacity_logit, self.sh.reshape(len(self), -1)])
        with open(prefix + ".bound.bin", "wb") as fh:
            fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
        header = {"format": "bound-gaussians", "version": 1, "dtype": "float64-le", "rows": len(self),
                  "columns": [{"name": c, "width": w} for c, w in cols], "sh_coeffs": k,
                  "n_per_triangle": self.n_per_triangle, "thin_scale": self.thin_scale}
        with open(prefix + ".bound.json", "w") as fh:
            json.dump(header, fh, indent=1)

    @classmethod
    def load(cls, prefix) -> "BoundScene":
        prefix = str(prefix)
        with open(prefix + ".bound.json") as fh:
            hdr = json.load(fh)
        data = read_ply(prefix + ".mesh.ply")
        v = data["vertex"]
        verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        faces = np.asarray(next(iter(data["face"].values())), dtype=np.int64)
        width = sum(c["width"] for c in hdr["columns"])
        raw = np.fromfile(prefix + ".bound.bin", dtype="<f8")
        if raw.size != width * hdr["rows"]:
            raise ValueError(f"{prefix}.bound.bin holds {raw.size} values, header expects {width * hdr['rows']}")
        t = raw.reshape(hdr["rows"], width)
        k = hdr["sh_coeffs"]
        return cls(TriangleMesh(verts, faces), t[:, 0].astype(np.int64), t[:, 1:4], t[:, 4:6], t[:, 6:8],
                   t[:, 8].copy(), t[:, 9:].reshape(-1, k, 3).copy(), int(hdr["n_per_triangle"]),
                   float(hdr["thin_scale"]))


def _world(bs: BoundScene, check: bool = True):
    m = bs.mesh
    faces = m.faces[bs.tri_id]
    means = np.einsum("mk,mki->mi", bs.bary, m.vertices[faces])
    R, inter = _frames(m.vertices, faces, check)
    unit, rnorm, zero = _rot2_unit(bs.rot2)
    R_g = gaussian_rotations(R, unit)
    scales = np.column_stack([np.full(len(bs), bs.thin_scale), np.exp(bs.log_scale2)])
    return means, R_g, scales, (faces, R, inter, unit, rnorm, zero)


def bound_to_world(bs: BoundScene, i: int | None = None):
    """World-space Gaussian3D for entry ``i``, or the whole bound scene as a Scene."""
    if i is None:
        return bs.to_scene()
    sub = BoundScene(bs.mesh, bs.tri_id[i:i + 1], bs.bary[i:i + 1], bs.log_scale2[i:i + 1], bs.rot2[i:i + 1],
                     bs.opacity_logit[i:i + 1], bs.sh[i:i + 1], bs.n_per_triangle, bs.thin_scale)
    means, R_g, scales = sub.world()
    return Gaussian3D(means[0], np.log(scales[0]), rotmat_to_quat(R_g)[0], float(bs.opacity_logit[i]), bs.sh[i])


def mean_edge_length(mesh: TriangleMesh) -> float:
    e = mesh.edges()
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).mean())


def _layout_spacing(layout: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Mean distance between layout points per triangle (vertex distance for one point)."""
    pts = np.einsum("lk,fki->fli", layout, tri)
    if len(layout) == 1:
        return np.linalg.norm(tri - pts, axis=2).mean(axis=1)
    i, j = np.triu_indices(len(layout), 1)
    return np.linalg.norm(pts[:, i] - pts[:, j], axis=2).mean(axis=1)


def default_per_triangle(mesh: TriangleMesh) -> int:
    """Fewer triangles get more Gaussians each, keeping the total count in the same range."""
    return 6 if mesh.n_vertices <= DENSE_MESH_VERTICES else 1


def bind_gaussians(mesh: TriangleMesh, n_per_triangle: int | None = None, init_scene: Scene | None = None,
                   opacity: float = 0.99, sh_degree: int | None = None) -> BoundScene:
    """Place ``n_per_triangle`` flat Gaussians on every face of ``mesh``."""
    if mesh.n_faces == 0:
        raise MeshError("cannot bind Gaussians to an empty mesh")
    if n_per_triangle is None:
        n_per_triangle = default_per_triangle(mesh)
    layout = bary_layout(n_per_triangle)
    _frames(mesh.vertices, mesh.faces)   # rejects degenerate faces up front
    nf, n = mesh.n_faces, n_per_triangle
    tri_id = np.repeat(np.arange(nf), n)
    bary = np.tile(layout, (nf, 1))
    tri = mesh.vertices[mesh.faces]
    spacing = 0.5 * _layout_spacing(layout, tri)
    log_scale2 = np.repeat(np.log(np.column_stack([spacing, spacing])), n, axis=0)
    rot2 = np.tile([1.0, 0.0], (nf * n, 1))
    opac = np.full(nf * n, float(logit(np.array(opacity))))
    if sh_degree is None:
        sh_degree = init_scene.sh_degree if init_scene is not None else 0
    k = (sh_degree + 1) ** 2
    sh = np.zeros((nf * n, k, 3))
    means = np.einsum("mk,mki->mi", bary, tri[tri_id])
    if init_scene is not None and len(init_scene):
        _, nn = cKDTree(init_scene.means).query(means)
        kk = min(k, init_scene.sh.shape[1])
        sh[:, :kk] = init_scene.sh[nn, :kk]
    # SH zero gives the 0.5 gray everywhere
    thin = THIN_FACTOR * mean_edge_length(mesh)
    return BoundScene(mesh.copy(), tri_id, bary, log_scale2, rot2, opac, sh, n, thin)


# ---------------------------------------------------------------------------
# losses and gradients

def normal_consistency(mesh: TriangleMesh):
    """Mean over edge-adjacent face pairs of ``1 - cos`` of their normals, and the vertex gradient."""
    pairs = mesh.adjacent_face_pairs()
    dV = np.zeros_like(mesh.vertices)
    if len(pairs) == 0:
        return 0.0, dV
    R, inter = _frames(mesh.vertices, mesh.faces, check=False)
    nrm = R[:, :, 0]
    a, b = pairs[:, 0], pairs[:, 1]
    loss = float(np.mean(1.0 - np.einsum("pi,pi->p", nrm[a], nrm[b])))
    gn = np.zeros_like(nrm)
    np.add.at(gn, a, -nrm[b] / len(pairs))
    np.add.at(gn, b, -nrm[a] / len(pairs))
    # only the normal column carries gradient
    e1, e2, c, cn, e1n, r0, r1 = inter
    gc = normalize_vec_vjp(r0, cn, gn)
    ge1 = np.cross(e2, gc)
    ge2 = np.cross(gc, e1)
    f = mesh.faces
    np.add.at(dV, f[:, 1], ge1)
    np.add.at(dV, f[:, 2], ge2)
    np.add.at(dV, f[:, 0], -ge1 - ge2)
    return loss, dV


@dataclass
class BoundGrads:
    vertices: np.ndarray
    log_scale2: np.ndarray
    rot2: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"vertices": self.vertices, "log_scale2": self.log_scale2, "rot2": self.rot2,
                "opacity_logit": self.opacity_logit, "sh": self.sh}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


def render_bound(bs: BoundScene, cam: Camera, settings: RenderSettings = DEFAULT_SETTINGS):
    means, R_g, scales, aux = _world(bs)
    covs = covariance(R_g, scales)
    colors, raw = sh_colors(bs.sh, means, cam.center)
    opac = 1.0 / (1.0 + np.exp(-bs.opacity_logit))
    out = render_gaussians(means, covs, opac, colors, cam, settings)
    out.cache.update(bound=(means, R_g, scales, aux, raw, opac))
    return out


def backward_bound(bs: BoundScene, cam: Camera, out, grad_image: np.ndarray) -> BoundGrads:
    """Chain image gradients through the renderer and the binding to the bound parameters."""
    means, R_g, scales, aux, raw, opac = out.cache["bound"]
    faces, R, inter, unit, rnorm, zero = aux
    d_means, d_covs, d_opac, d_color = backward_gaussians(out, cam, grad_image)
    d_sh, d_means_sh = sh_colors_vjp(bs.sh, means, cam.center, raw, d_color)
    d_means = d_means + d_means_sh
    dRg, ds = covariance_vjp(R_g, scales, d_covs)
    d_ls2 = ds[:, 1:] * scales[:, 1:]
    # R_g columns: [r0, x r1 + y r2, -y r1 + x r2]
    x, y = unit[:, 0:1], unit[:, 1:2]
    g0, g1, g2 = dRg[:, :, 0], dRg[:, :, 1], dRg[:, :, 2]
    r1, r2 = R[:, :, 1], R[:, :, 2]
    dR = np.stack([g0, x * g1 - y * g2, y * g1 + x * g2], axis=2)
    du = np.column_stack([np.sum(g1 * r1 + g2 * r2, axis=1), np.sum(g1 * r2 - g2 * r1, axis=1)])
    d_rot2 = np.where(zero[:, None], 0.0, normalize_vec_vjp(unit, rnorm, du))
    nv = bs.mesh.n_vertices
    dV = _frames_vjp(faces, nv, inter, dR)
    for k in range(3):
        np.add.at(dV, faces[:, k], bs.bary[:, k:k + 1] * d_means)
    d_logit = d_opac * opac * (1.0 - opac)
    return BoundGrads(dV, d_ls2, d_rot2, d_logit, d_sh)


# ---------------------------------------------------------------------------
# refinement

@dataclass
class RefineConfig:
    iters: int = 2000
    photometric: float = 1.0
    normal_consistency: float = 0.1
    dssim: float = 0.2
    lr_vertices: float = 1e-4      # multiplied by the scene scale
    lr_log_scale2: float = 5e-3
    lr_rot2: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    seed: int = 0
    checkpoints: int = 2           # held-out evaluations at 0, N/2, ..., N
    render: RenderSettings = field(default_factory=RenderSettings)


def _scene_scale(bs: BoundScene) -> float:
    v = bs.mesh.vertices
    return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


def heldout_psnr(bs: BoundScene, images, cams, settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    return float(np.mean([psnr(render_bound(bs, c, settings).image, im) for im, c in zip(images, cams)]))


def refine(bs: BoundScene, images, cams, cfg: RefineConfig | None = None, heldout=None,
           history: list | None = None) -> BoundScene:
    """Jointly optimize mesh vertices and bound Gaussians (barycentric coordinates stay fixed).

    ``heldout`` is an optional ``(images, cams)`` pair evaluated at the checkpoints;
    results are appended to ``history`` as ``{"step", "psnr"}`` records.
    """
    cfg = cfg or RefineConfig()
    if len(images) != len(cams):
        raise ValueError("images and cameras must be aligned")
    bs = bs.copy()
    if cfg.iters <= 0:
        return bs
    rng = np.random.default_rng(cfg.seed)
    opt = Adam({"vertices": cfg.lr_vertices * _scene_scale(bs), "log_scale2": cfg.lr_log_scale2,
                "rot2": cfg.lr_rot2, "opacity_logit": cfg.lr_opacity, "sh": cfg.lr_sh})
    marks = sorted({round(i * cfg.iters / cfg.checkpoints) for i in range(cfg.checkpoints + 1)}) \
        if cfg.checkpoints > 0 else []
    hist = history if history is not None else []

    def checkpoint(step):
        if heldout is not None and step in marks:
            hist.append({"step": step, "psnr": heldout_psnr(bs, heldout[0], heldout[1], cfg.render)})

    checkpoint(0)
    images = [np.asarray(im, dtype=np.float64) for im in images]
    for step in range(cfg.iters):
        v = int(rng.integers(len(cams)))
        out = render_bound(bs, cams[v], cfg.render)
        loss, g_img = photometric_loss(out.image, images[v], cfg.dssim)
        grads = backward_bound(bs, cams[v], out, g_img * cfg.photometric)
        nc = 0.0
        if cfg.normal_consistency > 0:
            nc, dV = normal_consistency(bs.mesh)
            grads.vertices = grads.vertices + cfg.normal_consistency * dV
        total = cfg.photometric * loss + cfg.normal_consistency * nc
        if not math.isfinite(total) or not grads.is_finite():
            raise TrainingDivergedError(f"non-finite loss or gradient at refinement step {step}", bs.copy(), step)
        params = {"vertices": bs.mesh.vertices, "log_scale2": bs.log_scale2, "rot2": bs.rot2,
                  "opacity_logit": bs.opacity_logit, "sh": bs.sh}
        opt.step(params, grads.as_dict())
        if history is not None and heldout is None:
            hist.append({"step": step, "photometric": loss, "normal_consistency": nc})
        checkpoint(step + 1)
    return bs


# ---------------------------------------------------------------------------
# editing

def _mean_side(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return (np.linalg.norm(v[:, 1] - v[:, 0], axis=1) + np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
            + np.linalg.norm(v[:, 0] - v[:, 2], axis=1)) / 3.0


def edit_rescale(bs: BoundScene, old_mesh: TriangleMesh, new_mesh: TriangleMesh) -> BoundScene:
    """Move the bound scene onto an edited mesh, scaling each Gaussian's in-plane scales
    by its triangle's mean-side-length ratio.  Rotations are kept."""
    if old_mesh.faces.shape != new_mesh.faces.shape or not np.array_equal(old_mesh.faces, new_mesh.faces) \
            or old_mesh.n_vertices != new_mesh.n_vertices:
        raise MeshError("edited mesh must have the same vertices and faces as the original")
    ratio = _mean_side(new_mesh) / _mean_side(old_mesh)
    out = bs.copy()
    out.mesh = new_mesh.copy()
    out.log_scale2 = out.log_scale2 + np.log(ratio[bs.tri_id])[:, None]
    out.thin_scale = bs.thin_scale * float(np.exp(np.mean(np.log(ratio))))
    return out
