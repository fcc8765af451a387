import numpy as np
import pytest

from gausssurf.mesh import (MeshError, TriangleMesh, icosphere, load_mesh, merge_meshes, save_mesh)


def tetra():
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(V, F)


def test_tetra_topology_and_volume():
    t = tetra()
    assert t.euler_characteristic() == 2
    assert len(t.boundary_edges()) == 0 and len(t.nonmanifold_edges()) == 0
    assert t.signed_volume() == pytest.approx(1 / 6)
    assert t.flipped().signed_volume() == pytest.approx(-1 / 6)
    assert len(t.adjacent_face_pairs()) == 6


@pytest.mark.parametrize("k", [0, 1, 3])
def test_icosphere_counts(k):
    s = icosphere(k)
    assert s.n_vertices == 10 * 4**k + 2
    np.testing.assert_allclose(np.linalg.norm(s.vertices, axis=1), 1.0, atol=1e-12)
    assert s.euler_characteristic() == 2 and s.signed_volume() > 0


def test_bad_face_index():
    with pytest.raises(MeshError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


@pytest.mark.parametrize("ext", [".obj", ".ply"])
def test_mesh_file_round_trip(tmp_path, ext):
    m = icosphere(1)
    save_mesh(m, tmp_path / f"m{ext}")
    back = load_mesh(tmp_path / f"m{ext}")
    np.testing.assert_allclose(back.vertices, m.vertices, rtol=1e-6, atol=1e-7)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_unknown_mesh_extension(tmp_path):
    with pytest.raises(MeshError):
        save_mesh(tetra(), tmp_path / "m.stl")


def test_merge_offsets_indices():
    a, b = tetra(), tetra()
    b.vertices += 3.0
    m = merge_meshes([a, b])
    assert m.n_vertices == 8 and m.n_faces == 8
    assert m.faces[4:].min() == 4
    assert len(np.unique(m.face_components())) == 2


def test_remove_degenerate_and_unreferenced():
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0], [9, 9, 9]])
    m = TriangleMesh(V, np.array([[0, 1, 2], [0, 1, 3]]))   # second face is collinear
    clean = m.remove_degenerate().remove_unreferenced()
    assert clean.n_faces == 1 and clean.n_vertices == 3


def test_area_weighted_sampling(rng):
    V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 3, 0]])
    m = TriangleMesh(V, np.array([[0, 1, 2], [3, 4, 5]]))
    pts, fid = m.sample_surface(20000, rng)
    assert abs(np.mean(fid == 1) - 9 / 10) < 0.01
    assert np.all(pts[fid == 0].sum(axis=1) <= 1 + 1e-12)


def test_vertex_normals_of_sphere_point_outward():
    s = icosphere(2)
    n = s.compute_vertex_normals()
    assert np.all(np.einsum("ij,ij->i", n, s.vertices) > 0.99)
