"""Screened Poisson reconstruction on a regular grid, marching cubes and QEM decimation."""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _sk_marching_cubes

from .density_field import GaussianCache, NeighborIndex, evaluate, rebuild_index
from .level_set import LevelSetConfig, OrientedPointCloud, camera_box, sample_level_set, split_fg_bg
from .mesh import MeshError, TriangleMesh, merge_meshes
from .scene_io import Scene

log = logging.getLogger(__name__)

MIN_POINTS = 100
SCREENING = 4.0          # in units of spacing**-2
CG_RTOL = 1e-7
CG_MAXITER = 2000
MIN_COMPONENT_FRACTION = 1e-3
AREA_NEIGHBORS = 8


class PoissonError(RuntimeError):
    pass


@dataclass
class ScalarGrid:
    resolution: tuple
    origin: np.ndarray
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if min(self.resolution) < 2:
            raise ValueError("grid resolution must be at least 2 per axis")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if self.values.size != int(np.prod(self.resolution)):
            raise ValueError("values length must equal nx*ny*nz")

    @classmethod
    def from_bounds(cls, lo, hi, res: int, pad: float = 0.05) -> "ScalarGrid":
        """Cubic-cell grid with ``res`` nodes along the longest padded side."""
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        ext = hi - lo
        lo = lo - pad * ext.max()
        hi = hi + pad * ext.max()
        h = float((hi - lo).max()) / (res - 1)
        if h <= 0:
            raise ValueError("degenerate bounds")
        shape = tuple(int(math.ceil((hi[a] - lo[a]) / h - 1e-9)) + 1 for a in range(3))
        shape = tuple(max(2, s) for s in shape)
        return cls(shape, lo, h, np.zeros(int(np.prod(shape))))

    @property
    def volume(self) -> np.ndarray:
        return self.values.reshape(self.resolution)

    def node_points(self) -> np.ndarray:
        ax = [self.origin[a] + self.spacing * np.arange(self.resolution[a]) for a in range(3)]
        g = np.meshgrid(*ax, indexing="ij")
        return np.stack([x.reshape(-1) for x in g], axis=1)

    def trilinear(self, points: np.ndarray):
        """Flat corner indices (M, 8) and weights (M, 8); points are clamped to the grid."""
        u = (np.asarray(points, dtype=np.float64) - self.origin) / self.spacing
        res = np.array(self.resolution)
        base = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
        fr = np.clip(u - base, 0.0, 1.0)
        idx = np.empty((len(u), 8), dtype=np.int64)
        w = np.empty((len(u), 8))
        k = 0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = base + [dx, dy, dz]
                    idx[:, k] = (c[:, 0] * res[1] + c[:, 1]) * res[2] + c[:, 2]
                    w[:, k] = ((fr[:, 0] if dx else 1 - fr[:, 0]) * (fr[:, 1] if dy else 1 - fr[:, 1])
                               * (fr[:, 2] if dz else 1 - fr[:, 2]))
                    k += 1
        return idx, w

    def splat(self, points, values) -> np.ndarray:
        idx, w = self.trilinear(points)
        return np.bincount(idx.reshape(-1), weights=(w * np.asarray(values)[:, None]).reshape(-1),
                           minlength=self.values.size)

    def interpolate(self, points) -> np.ndarray:
        idx, w = self.trilinear(points)
        return np.sum(self.values[idx] * w, axis=1)


def point_areas(points: np.ndarray, k: int = AREA_NEIGHBORS) -> np.ndarray:
    """Surface area represented by each sample, from the distance to its k-th neighbor."""
    k = min(k, len(points) - 1)
    d, _ = cKDTree(points).query(points, k=k + 1)
    r = d[:, -1]
    return math.pi * r * r / k


def _forward_diff(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h


def _gradient_operator(shape, h):
    nx, ny, nz = shape
    I = [sp.identity(n, format="csr") for n in shape]
    Dx = sp.kron(sp.kron(_forward_diff(nx, h), I[1]), I[2])
    Dy = sp.kron(sp.kron(I[0], _forward_diff(ny, h)), I[2])
    Dz = sp.kron(sp.kron(I[0], I[1]), _forward_diff(nz, h))
    return [Dx.tocsr(), Dy.tocsr(), Dz.tocsr()]


def _edge_average(vol: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(vol, axis, 0)
    return np.moveaxis(0.5 * (a[1:] + a[:-1]), 0, axis).reshape(-1)


@dataclass
class PoissonInfo:
    resolution: tuple
    spacing: float
    n_points: int
    iterations: int
    residual: float
    iso: float
    n_faces_removed: int = 0
    extra: dict = field(default_factory=dict)


def solve_indicator(cloud: OrientedPointCloud, grid: ScalarGrid, screening: float = SCREENING,
                    rtol: float = CG_RTOL, maxiter: int = CG_MAXITER):
    """Indicator function on ``grid``: least-squares fit of its gradient to the splatted
    normal field plus a screening term anchoring it to zero at the samples.

    Normal equations ``(-L + s W) chi = D^T V`` with the 7-point Neumann Laplacian
    ``L = -D^T D``, ``s = screening / h**2`` and ``W`` the splatted sample area over ``h**2``.
    """
    h = grid.spacing
    pts, nrm = cloud.points, cloud.normals
    area = point_areas(pts)
    shape = grid.resolution
    D = _gradient_operator(shape, h)
    vol_v = [grid.splat(pts, area * nrm[:, a]).reshape(shape) / h**3 for a in range(3)]
    rhs = sum(D[a].T @ _edge_average(vol_v[a], a) for a in range(3))
    W = grid.splat(pts, area) / h**2
    A = (D[0].T @ D[0] + D[1].T @ D[1] + D[2].T @ D[2] + sp.diags(screening / h**2 * W)).tocsr()
    diag = A.diagonal()
    M = sp.diags(1.0 / diag)
    count = [0]

    def cb(_):
        count[0] += 1

    bnorm = float(np.linalg.norm(rhs))
    chi, status = cg(A, rhs, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=cb)
    res = float(np.linalg.norm(rhs - A @ chi)) / max(bnorm, 1e-300)
    if status != 0:
        raise PoissonError(f"conjugate gradient did not converge in {maxiter} iterations "
                           f"(relative residual {res:.3e})")
    return chi, count[0], res


def _cloud_bounds(points):
    return points.min(axis=0), points.max(axis=0)


def poisson_reconstruct(cloud: OrientedPointCloud, res: int = 128, screening: float = SCREENING,
                        bounds=None, rtol: float = CG_RTOL, maxiter: int = CG_MAXITER,
                        min_component: float = MIN_COMPONENT_FRACTION, return_info: bool = False):
    """Mesh the zero crossing of the screened-Poisson indicator of an oriented cloud.

    Faces are oriented along the input normals.  ``bounds`` defaults to the cloud's
    bounding box; the grid has ``res`` nodes along its longest side.
    """
    if len(cloud) < MIN_POINTS:
        raise PoissonError(f"Poisson reconstruction needs at least {MIN_POINTS} points, got {len(cloud)}")
    n = np.linalg.norm(cloud.normals, axis=1)
    if np.any(np.abs(n - 1.0) > 1e-5):
        raise PoissonError("normals must be unit length")
    lo, hi = bounds if bounds is not None else _cloud_bounds(cloud.points)
    grid = ScalarGrid.from_bounds(lo, hi, res, pad=0.08)
    chi, iters, resid = solve_indicator(cloud, grid, screening, rtol, maxiter)
    grid.values = chi
    iso = float(np.mean(grid.interpolate(cloud.points)))
    # chi grows along the normals, so its negation decreases outward
    neg = ScalarGrid(grid.resolution, grid.origin, grid.spacing, -chi)
    mesh = marching_cubes(neg, -iso)
    mesh, removed = keep_large_components(mesh, min_component)
    if not return_info:
        return mesh
    return mesh, PoissonInfo(grid.resolution, grid.spacing, len(cloud), iters, resid, iso, removed)


def keep_large_components(mesh: TriangleMesh, min_fraction: float = MIN_COMPONENT_FRACTION):
    if mesh.n_faces == 0:
        return mesh, 0
    lab = mesh.face_components()
    counts = np.bincount(lab)
    keep = counts[lab] >= min_fraction * mesh.n_faces
    out = TriangleMesh(mesh.vertices, mesh.faces[keep]).remove_unreferenced()
    return out, int((~keep).sum())


def _sample_grid(field, grid: ScalarGrid, chunk: int = 65536) -> np.ndarray:
    pts = grid.node_points()
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = field(pts[s:s + chunk])
    return out


def marching_cubes(field, iso: float = 0.0, bounds=None, res: int = 64) -> TriangleMesh:
    """Iso-surface of a ScalarGrid, or of a callable sampled on ``res`` nodes over ``bounds``.

    Faces are oriented so their normals point toward decreasing field values.  A
    field that never crosses ``iso`` gives an empty mesh.
    """
    if not isinstance(field, ScalarGrid):
        if bounds is None:
            raise ValueError("a callable field needs bounds")
        grid = ScalarGrid.from_bounds(bounds[0], bounds[1], res, pad=0.0)
        grid.values = _sample_grid(field, grid)
        field = grid
    vol = field.volume
    if not np.all(np.isfinite(vol)):
        raise ValueError("field contains non-finite values")
    if not (vol.min() < iso < vol.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = _sk_marching_cubes(vol, level=iso, spacing=(field.spacing,) * 3,
                                            gradient_direction="descent", allow_degenerate=False)
    mesh = TriangleMesh(verts.astype(np.float64) + field.origin, faces.astype(np.int64))
    mesh = mesh.remove_degenerate()
    return _orient_descending(mesh, field, iso)


def _orient_descending(mesh: TriangleMesh, grid: ScalarGrid, iso: float) -> TriangleMesh:
    """Flip faces whose normal points up the field gradient (majority vote per component)."""
    if mesh.n_faces == 0:
        return mesh
    c = mesh.vertices[mesh.faces].mean(axis=1)
    nrm = mesh.face_normals()
    step = 0.5 * grid.spacing
    dv = grid.interpolate(c + step * nrm) - grid.interpolate(c - step * nrm)
    lab = mesh.face_components()
    vote = np.bincount(lab, weights=np.sign(dv), minlength=lab.max() + 1)
    flip = vote[lab] > 0
    if np.any(flip):
        f = mesh.faces.copy()
        f[flip] = f[flip][:, ::-1]
        mesh = TriangleMesh(mesh.vertices, f)
    return mesh


# ---------------------------------------------------------------------------
# QEM decimation

def _face_planes(v: np.ndarray, f: np.ndarray):
    c = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area2 = np.linalg.norm(c, axis=1)
    n = c / np.where(area2 > 0, area2, 1.0)[:, None]
    d = -np.einsum("ij,ij->i", n, v[f[:, 0]])
    return np.column_stack([n, d]), 0.5 * area2


def _plane_quadrics(planes, weights):
    return weights[:, None, None] * np.einsum("fi,fj->fij", planes, planes)


class _Decimator:
    def __init__(self, mesh: TriangleMesh, boundary_weight: float = 1e3):
        self.v = mesh.vertices.copy()
        self.f = mesh.faces.copy()
        nv = len(self.v)
        self.alive_f = np.ones(len(self.f), dtype=bool)
        self.alive_v = np.zeros(nv, dtype=bool)
        self.alive_v[np.unique(self.f)] = True
        self.vf: list[set] = [set() for _ in range(nv)]
        for fi, tri in enumerate(self.f.tolist()):
            for x in tri:
                self.vf[x].add(fi)
        planes, areas = _face_planes(self.v, self.f)
        Q = np.zeros((nv, 4, 4))
        fq = _plane_quadrics(planes, areas)
        for k in range(3):
            np.add.at(Q, self.f[:, k], fq)
        self._add_boundary_quadrics(Q, mesh, boundary_weight)
        self.Q = Q
        self.version = np.zeros(nv, dtype=np.int64)
        self.heap: list = []
        self.executed_costs: list[float] = []
        e = mesh.edges()
        for a, b in e.tolist():
            self._push(a, b)

    def _add_boundary_quadrics(self, Q, mesh, weight):
        be = mesh.boundary_edges()
        if len(be) == 0:
            return
        # plane through the boundary edge perpendicular to its face
        fn = mesh.face_normals()
        edge_face = {}
        for fi, tri in enumerate(self.f.tolist()):
            for k in range(3):
                a, b = tri[k], tri[(k + 1) % 3]
                edge_face[(min(a, b), max(a, b))] = fi
        for a, b in be.tolist():
            fi = edge_face[(a, b)]
            d = self.v[b] - self.v[a]
            n = np.cross(d, fn[fi])
            nn = np.linalg.norm(n)
            if nn == 0:
                continue
            n /= nn
            p = np.append(n, -n @ self.v[a])
            q = weight * np.dot(d, d) * np.outer(p, p)
            Q[a] += q
            Q[b] += q

    def _optimal(self, a, b):
        Q = self.Q[a] + self.Q[b]
        A = Q[:3, :3]
        rhs = -Q[:3, 3]
        pos = None
        if abs(np.linalg.det(A)) > 1e-12 * max(1.0, np.abs(A).max()) ** 3:
            cand = np.linalg.solve(A, rhs)
            # guard against far-off solutions of nearly singular quadrics
            mid = 0.5 * (self.v[a] + self.v[b])
            if np.linalg.norm(cand - mid) <= 2.0 * np.linalg.norm(self.v[a] - self.v[b]) + 1e-12:
                pos = cand
        if pos is None:
            pos = 0.5 * (self.v[a] + self.v[b])
        h = np.append(pos, 1.0)
        return max(float(h @ Q @ h), 0.0), pos

    def _push(self, a, b):
        cost, pos = self._optimal(a, b)
        heapq.heappush(self.heap, (cost, a, b, int(self.version[a]), int(self.version[b]), pos))

    def _neighbors(self, x):
        out = set()
        for fi in self.vf[x]:
            out.update(self.f[fi].tolist())
        out.discard(x)
        return out

    def _link_ok(self, a, b) -> bool:
        shared = self.vf[a] & self.vf[b]
        if not shared:
            return False
        opposite = set()
        for fi in shared:
            opposite.update(self.f[fi].tolist())
        opposite -= {a, b}
        common = self._neighbors(a) & self._neighbors(b)
        return common == opposite

    def _flip_ok(self, a, b, pos) -> bool:
        for x in (a, b):
            for fi in self.vf[x]:
                tri = self.f[fi]
                if a in tri and b in tri:
                    continue
                p = self.v[tri]
                old = np.cross(p[1] - p[0], p[2] - p[0])
                q = p.copy()
                q[tri == x] = pos
                new = np.cross(q[1] - q[0], q[2] - q[0])
                on, nn = np.linalg.norm(old), np.linalg.norm(new)
                if nn <= 1e-14 * max(on, 1e-300):
                    return False
                if on > 0 and np.dot(old, new) / (on * nn) < 0.2:
                    return False
        return True

    def collapse_until(self, target: int) -> None:
        n_alive = int(self.alive_v.sum())
        while n_alive > target and self.heap:
            cost, a, b, va, vb, pos = heapq.heappop(self.heap)
            if not (self.alive_v[a] and self.alive_v[b]):
                continue
            if self.version[a] != va or self.version[b] != vb:
                continue
            if not self._link_ok(a, b) or not self._flip_ok(a, b, pos):
                continue
            self.executed_costs.append(cost)
            for fi in list(self.vf[a] & self.vf[b]):
                self.alive_f[fi] = False
                for x in self.f[fi].tolist():
                    self.vf[x].discard(fi)
            for fi in self.vf[b]:
                tri = self.f[fi]
                tri[tri == b] = a
                self.vf[a].add(fi)
            self.vf[b] = set()
            self.alive_v[b] = False
            self.v[a] = pos
            self.Q[a] += self.Q[b]
            self.version[a] += 1
            self.version[b] += 1
            n_alive -= 1
            # edges to a are re-pushed; stale entries fail the version check
            for x in self._neighbors(a):
                self._push(min(a, x), max(a, x))

    def result(self) -> TriangleMesh:
        return TriangleMesh(self.v, self.f[self.alive_f]).remove_unreferenced()


def decimate_qem(mesh: TriangleMesh, target_vertices: int, return_costs: bool = False):
    """Garland-Heckbert edge-collapse simplification down to ``target_vertices``.

    Collapses that would break the link condition, flip a face normal or create a
    degenerate face are skipped.  Boundary edges carry penalty quadrics.
    """
    if target_vertices >= mesh.n_vertices:
        if target_vertices > mesh.n_vertices:
            log.warning("target %d exceeds the current vertex count %d; mesh left unchanged",
                        target_vertices, mesh.n_vertices)
        out = mesh.copy()
        return (out, []) if return_costs else out
    if target_vertices < 4:
        raise ValueError("target_vertices must be at least 4")
    nm = len(mesh.nonmanifold_edges())
    if nm:
        log.warning("decimating a mesh with %d non-manifold edges", nm)
    dec = _Decimator(mesh)
    dec.collapse_until(target_vertices)
    out = dec.result()
    return (out, dec.executed_costs) if return_costs else out


# ---------------------------------------------------------------------------
# full pipeline

@dataclass
class ExtractionResult:
    mesh: TriangleMesh
    metadata: dict


def extract_mesh(scene: Scene, cams, level_cfg: LevelSetConfig | None = None, res: int = 128,
                 target_vertices: int | None = None, index: NeighborIndex | None = None,
                 screening: float = SCREENING) -> ExtractionResult:
    """Level-set points, split into foreground and background, one Poisson solve per part."""
    level_cfg = level_cfg or LevelSetConfig()
    index = index or rebuild_index(scene)
    cloud = sample_level_set(scene, cams, level_cfg, index)
    fg, bg = split_fg_bg(cloud, cams)
    meta = {"lambda": level_cfg.lam, "resolution": res, "n_points": len(cloud),
            "n_foreground": len(fg), "n_background": len(bg), "parts": []}
    meshes = []
    if len(fg) >= MIN_POINTS:
        m, info = poisson_reconstruct(fg, res, screening, return_info=True)
        meshes.append(m)
        meta["parts"].append({"part": "foreground", "grid": list(info.resolution), "spacing": info.spacing,
                              "cg_iterations": info.iterations, "cg_residual": info.residual,
                              "n_vertices": m.n_vertices})
    lo, hi = camera_box(cams)
    if len(bg) >= MIN_POINTS:
        center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        big_lo, big_hi = center - 8.0 * half, center + 8.0 * half
        inside = np.all((bg.points >= big_lo) & (bg.points <= big_hi), axis=1)
        bg = bg.subset(inside)
        meta["n_background_used"] = len(bg)
    if len(bg) >= MIN_POINTS:
        m, info = poisson_reconstruct(bg, max(res // 2, 8), screening, bounds=(big_lo, big_hi),
                                      return_info=True)
        # the foreground mesh owns the camera box
        vin = np.all((m.vertices >= lo) & (m.vertices <= hi), axis=1)
        keep = ~np.all(vin[m.faces], axis=1)
        m = TriangleMesh(m.vertices, m.faces[keep]).remove_unreferenced()
        meshes.append(m)
        meta["parts"].append({"part": "background", "grid": list(info.resolution), "spacing": info.spacing,
                              "cg_iterations": info.iterations, "cg_residual": info.residual,
                              "n_vertices": m.n_vertices})
    if not meshes:
        raise PoissonError(f"too few level-set points for Poisson reconstruction ({len(cloud)} total)")
    mesh = merge_meshes(meshes)
    if target_vertices is not None and target_vertices < mesh.n_vertices:
        mesh = decimate_qem(mesh, target_vertices)
    meta["n_vertices"] = mesh.n_vertices
    meta["n_faces"] = mesh.n_faces
    return ExtractionResult(mesh, meta)


def density_grid(scene: Scene, bounds, res: int, index: NeighborIndex | None = None,
                 chunk: int = 32768) -> ScalarGrid:
    index = index or rebuild_index(scene)
    cache = GaussianCache(scene)
    grid = ScalarGrid.from_bounds(bounds[0], bounds[1], res, pad=0.0)
    grid.values = _sample_grid(lambda p: evaluate(p, cache, index).d, grid, chunk)
    return grid


def density_marching_cubes(scene: Scene, lam: float = 0.3, res: int = 128, bounds=None,
                           index: NeighborIndex | None = None) -> TriangleMesh:
    """Baseline: marching cubes directly on the Gaussian density at level ``lam``."""
    if bounds is None:
        pad = 3.0 * float(scene.scales.max())
        bounds = (scene.means.min(axis=0) - pad, scene.means.max(axis=0) + pad)
    grid = density_grid(scene, bounds, res, index)
    mesh = marching_cubes(grid, lam)
    mesh, _ = keep_large_components(mesh)
    return mesh
