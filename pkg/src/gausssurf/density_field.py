"""Gaussian density, closest-Gaussian quantities, ideal density/SDF and spatial gradients.

Queries are restricted to the K-neighborhood of the Gaussian whose mean is
nearest to the query point; ``exact=True`` sums over every Gaussian instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._geometry import inverse_covariance, quat_to_rotmat
from .scene_io import Scene

K_NEIGHBORS = 16
D_CLAMP = 1e-12
GRAD_EPS = 1e-12


@dataclass
class NeighborIndex:
    neighbors: np.ndarray   # (N, K) ids sorted by (distance, id), self first
    tree: cKDTree
    means: np.ndarray       # snapshot of the means the index was built on
    stale_counter: int = 0

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def nearest_gaussian(self, points: np.ndarray) -> np.ndarray:
        _, idx = self.tree.query(points, k=1)
        return np.asarray(idx, dtype=np.int64)

    def tick(self, n: int = 1) -> None:
        self.stale_counter += n


def knn_sorted(points: np.ndarray, k: int, tree: cKDTree | None = None) -> np.ndarray:
    """Exact K nearest points for every point, ordered by (distance, index)."""
    n = len(points)
    k = min(k, n)
    tree = tree if tree is not None else cKDTree(points)
    kq = min(n, k + 8)
    dist, idx = tree.query(points, k=kq)
    dist = np.asarray(dist).reshape(n, kq)
    idx = np.asarray(idx).reshape(n, kq)
    order = np.lexsort((idx, dist), axis=1)
    return np.take_along_axis(idx, order, axis=1)[:, :k].astype(np.int64)


def rebuild_index(scene: Scene, k: int = K_NEIGHBORS) -> NeighborIndex:
    means = scene.means.copy()
    tree = cKDTree(means)
    return NeighborIndex(knn_sorted(means, k, tree), tree, means, 0)


class GaussianCache:
    """Per-Gaussian derived quantities for one scene state."""

    def __init__(self, scene: Scene):
        self.scene = scene
        self.means = scene.means
        self.R = quat_to_rotmat(scene.quats)
        self.scales = scene.scales
        self.prec = inverse_covariance(self.R, self.scales)
        self.alpha = scene.opacities
        # lowest axis index wins ties
        self.min_axis = np.argmin(self.scales, axis=1)
        self.s_min = self.scales[np.arange(len(scene)), self.min_axis]
        self.n_min = self.R[np.arange(len(scene)), :, self.min_axis]


@dataclass
class FieldEval:
    """Vectorized field evaluation at M points.

    ``ids``/``q``/``e`` hold the per-candidate Gaussian ids, Mahalanobis forms and
    ``exp(-q/2)`` values, kept for gradient computations.
    """

    points: np.ndarray
    ids: np.ndarray
    delta: np.ndarray   # (M, K, 3) p - mu
    v: np.ndarray       # (M, K, 3) prec @ delta
    q: np.ndarray
    e: np.ndarray
    d: np.ndarray
    g_star: np.ndarray
    grad_d: np.ndarray


def candidate_ids(points: np.ndarray, n: int, index: NeighborIndex | None, exact: bool) -> np.ndarray:
    m = len(points)
    if exact or index is None:
        return np.broadcast_to(np.arange(n), (m, n))
    return index.neighbors[index.nearest_gaussian(points)]


def evaluate(points, cache: GaussianCache, index: NeighborIndex | None, exact: bool = False) -> FieldEval:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = candidate_ids(p, len(cache.means), index, exact)
    delta = p[:, None, :] - cache.means[ids]
    v = np.einsum("mkij,mkj->mki", cache.prec[ids], delta)
    q = np.einsum("mki,mki->mk", delta, v)
    e = np.exp(-0.5 * q)
    a = cache.alpha[ids]
    d = np.sum(a * e, axis=1)
    grad = -np.einsum("mk,mki->mi", a * e, v)
    qmin = q.min(axis=1, keepdims=True)
    big = np.iinfo(np.int64).max
    g_star = np.where(q == qmin, ids, big).min(axis=1)
    return FieldEval(p, ids, delta, v, q, e, d, g_star, grad)


def _single(points, values):
    return values[0] if np.ndim(points) == 1 else values


def density(p, scene: Scene, index: NeighborIndex | None = None, exact: bool = False, cache=None):
    cache = cache or GaussianCache(scene)
    return _single(p, evaluate(p, cache, index, exact).d)


def closest_gaussian(p, scene: Scene, index: NeighborIndex | None = None, exact: bool = False, cache=None):
    cache = cache or GaussianCache(scene)
    return _single(p, evaluate(p, cache, index, exact).g_star)


def ideal_density(p, scene: Scene, index: NeighborIndex | None = None, exact: bool = False, cache=None):
    """Density the closest Gaussian would produce if flat and opaque."""
    cache = cache or GaussianCache(scene)
    ev = evaluate(p, cache, index, exact)
    g = ev.g_star
    t = np.einsum("mi,mi->m", ev.points - cache.means[g], cache.n_min[g])
    return _single(p, np.exp(-0.5 * t * t / cache.s_min[g] ** 2))


def sdf_magnitude(d: np.ndarray, s_star: np.ndarray) -> np.ndarray:
    dc = np.clip(d, D_CLAMP, 1.0 - D_CLAMP)
    return s_star * np.sqrt(-2.0 * np.log(dc))


def ideal_sdf(p, scene: Scene, index: NeighborIndex | None = None, exact: bool = False, cache=None):
    """Unsigned ideal distance ``s_{g*} sqrt(-2 log d(p))``; the caller picks the sign."""
    cache = cache or GaussianCache(scene)
    ev = evaluate(p, cache, index, exact)
    return _single(p, sdf_magnitude(ev.d, cache.s_min[ev.g_star]))


def density_gradient(p, scene: Scene, index: NeighborIndex | None = None, exact: bool = False, cache=None):
    """Spatial gradient of the density.

    Returns ``(grad, ok)`` where ``ok`` is False where the gradient norm is below
    1e-12 and callers should not derive a normal from it.
    """
    cache = cache or GaussianCache(scene)
    ev = evaluate(p, cache, index, exact)
    ok = np.linalg.norm(ev.grad_d, axis=1) >= GRAD_EPS
    return _single(p, ev.grad_d), _single(p, ok)


def sample(p, scene: Scene, index: NeighborIndex | None = None, exact: bool = False):
    """FieldSample-style dicts bundling density, closest Gaussian, ideal SDF and gradient."""
    cache = GaussianCache(scene)
    ev = evaluate(p, cache, index, exact)
    f = sdf_magnitude(ev.d, cache.s_min[ev.g_star])
    rows = [{"p": ev.points[i], "d": float(ev.d[i]), "g_star": int(ev.g_star[i]),
             "f_ideal": float(f[i]), "grad_d": ev.grad_d[i]} for i in range(len(ev.d))]
    return _single(p, rows)
