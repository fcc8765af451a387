"""Indexed triangle meshes: I/O (OBJ, binary PLY) and topology helpers."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .ply import read_ply, write_ply


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        vn = None if self.vertex_normals is None else self.vertex_normals.copy()
        return TriangleMesh(self.vertices.copy(), self.faces.copy(), vn)

    def face_cross(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def compute_vertex_normals(self) -> np.ndarray:
        acc = np.zeros_like(self.vertices)
        c = self.face_cross()
        for k in range(3):
            np.add.at(acc, self.faces[:, k], c)
        n = np.linalg.norm(acc, axis=1, keepdims=True)
        self.vertex_normals = acc / np.where(n > 0, n, 1.0)
        return self.vertex_normals

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i, j) pairs."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def edge_face_counts(self):
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edges(self) -> np.ndarray:
        e, c = self.edge_face_counts()
        return e[c == 1]

    def nonmanifold_edges(self) -> np.ndarray:
        e, c = self.edge_face_counts()
        return e[c > 2]

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edges()) + len(self.faces))

    def adjacent_face_pairs(self) -> np.ndarray:
        """(P, 2) pairs of faces sharing an edge (manifold edges only)."""
        f = len(self.faces)
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]), axis=1)
        fid = np.tile(np.arange(f), 3)
        key = e[:, 0] * (len(self.vertices) + 1) + e[:, 1]
        order = np.argsort(key, kind="stable")
        key, fid = key[order], fid[order]
        _, start, count = np.unique(key, return_index=True, return_counts=True)
        start = start[count == 2]  # edges shared by more than two faces are skipped
        return np.stack([fid[start], fid[start + 1]], axis=1)

    def face_components(self) -> np.ndarray:
        """Connected-component label per face (faces sharing a vertex are connected)."""
        f = len(self.faces)
        if f == 0:
            return np.zeros(0, dtype=np.int64)
        rows = np.repeat(np.arange(f), 3)
        cols = self.faces.reshape(-1)
        n = len(self.vertices)
        A = coo_matrix((np.ones(3 * f), (rows, f + cols)), shape=(f + n, f + n))
        _, labels = connected_components(A, directed=False)
        return labels[:f]

    def remove_unreferenced(self) -> "TriangleMesh":
        used = np.unique(self.faces)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        vn = None if self.vertex_normals is None else self.vertex_normals[used]
        return TriangleMesh(self.vertices[used], remap[self.faces], vn)

    def remove_degenerate(self, eps: float = 0.0) -> "TriangleMesh":
        f = self.faces
        ok = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        ok &= self.face_areas() > eps
        return TriangleMesh(self.vertices, f[ok], self.vertex_normals).remove_unreferenced()

    def flipped(self) -> "TriangleMesh":
        vn = None if self.vertex_normals is None else -self.vertex_normals
        return TriangleMesh(self.vertices.copy(), self.faces[:, ::-1].copy(), vn)

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def sample_surface(self, n: int, rng: np.random.Generator):
        """Area-weighted uniform surface samples; returns (points, face ids)."""
        if self.n_faces == 0:
            raise MeshError("cannot sample an empty mesh")
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise MeshError("mesh has zero surface area")
        fid = rng.choice(len(areas), size=n, p=areas / total)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.faces[fid]]
        pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
        return pts, fid


def merge_meshes(meshes) -> TriangleMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron (10 * 4**k + 2 vertices) projected to a sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mids = v[uniq[:, 0]] + v[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        base = len(v)
        v = np.concatenate([v, mids])
        nf = len(f)
        a, b, c = inv[:nf] + base, inv[nf:2 * nf] + base, inv[2 * nf:] + base
        f = np.concatenate([np.stack([f[:, 0], a, c], 1), np.stack([f[:, 1], b, a], 1),
                            np.stack([f[:, 2], c, b], 1), np.stack([a, b, c], 1)])
    return TriangleMesh(v * radius, f)


# ---------------------------------------------------------------------------
# I/O

def save_obj(mesh: TriangleMesh, path) -> None:
    lines = ["# gausssurf mesh"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.vertex_normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertex_normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.faces]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    verts, normals, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    vn = np.array(normals) if len(normals) == len(verts) and normals else None
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3), vn)


def save_mesh_ply(mesh: TriangleMesh, path) -> None:
    v = {"x": mesh.vertices[:, 0].astype(np.float32), "y": mesh.vertices[:, 1].astype(np.float32),
         "z": mesh.vertices[:, 2].astype(np.float32)}
    if mesh.vertex_normals is not None:
        for i, k in enumerate(("nx", "ny", "nz")):
            v[k] = mesh.vertex_normals[:, i].astype(np.float32)
    write_ply(path, {"vertex": v, "face": {"vertex_indices": mesh.faces.astype(np.int32)}})


def load_mesh_ply(path) -> TriangleMesh:
    data = read_ply(path)
    v = data["vertex"]
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    vn = None
    if all(k in v for k in ("nx", "ny", "nz")):
        vn = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in data:
        fk = next(iter(data["face"]))
        raw = data["face"][fk]
        if raw.dtype == object:
            tris = []
            for poly in raw:
                for k in range(1, len(poly) - 1):
                    tris.append([poly[0], poly[k], poly[k + 1]])
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
        elif raw.ndim == 2 and raw.shape[1] == 3:
            faces = raw.astype(np.int64)
        else:
            faces = np.concatenate([raw[:, [0, k, k + 1]] for k in range(1, raw.shape[1] - 1)]).astype(np.int64)
    return TriangleMesh(verts, faces, vn)


def save_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        save_obj(mesh, path)
    elif path.suffix.lower() == ".ply":
        save_mesh_ply(mesh, path)
    else:
        raise MeshError(f"unsupported mesh extension {path.suffix!r} (use .obj or .ply)")


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    if path.suffix.lower() == ".ply":
        return load_mesh_ply(path)
    raise MeshError(f"unsupported mesh extension {path.suffix!r} (use .obj or .ply)")
