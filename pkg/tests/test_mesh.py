import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmaxwell.mesh import LOCAL_FACES, Cuboid, MediumSpec, MeshError, build_structured_mesh, classify_faces

from conftest import cube_mesh, layered_mesh


def brute_force_faces(elements):
    """Count triangle multiplicities by enumerating every element face."""
    seen = {}
    for tet in elements:
        for tri in itertools.combinations(sorted(tet), 3):
            seen[tri] = seen.get(tri, 0) + 1
    interior = sum(1 for c in seen.values() if c == 2)
    exterior = sum(1 for c in seen.values() if c == 1)
    return interior, exterior


def test_single_cube_counts():
    mesh = build_structured_mesh(Cuboid(), 1)
    interior, exterior = classify_faces(mesh)
    assert mesh.n_elements == 6
    assert len(interior) == 6 and len(exterior) == 12
    assert brute_force_faces(mesh.elements) == (6, 12)


def test_two_cube_counts():
    assert build_structured_mesh(Cuboid(), 2).n_elements == 48
    mesh = build_structured_mesh(Cuboid(), (2, 1, 1))
    interior, exterior = classify_faces(mesh)
    assert len(exterior) == 20
    assert brute_force_faces(mesh.elements) == (len(interior), 20)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_volumes_partition_domain(nx, ny, nz):
    dom = Cuboid((0.0, -1.0, 0.5), (2.0, 0.5, 1.0))
    mesh = build_structured_mesh(dom, (nx, ny, nz))
    assert np.isclose(mesh.volumes.sum(), dom.volume, rtol=1e-13)
    assert np.all(mesh.volumes > 0)


def test_normals_unit_and_oriented():
    mesh = cube_mesh(2)
    assert np.allclose(np.linalg.norm(mesh.face_normal, axis=1), 1.0, atol=1e-14)
    cen = mesh.centroids
    inner = mesh.interior
    d = cen[mesh.face_neighbor[inner]] - cen[mesh.face_owner[inner]]
    assert np.all(np.einsum("fi,fi->f", d, mesh.face_normal[inner]) > 0)
    assert np.all(mesh.face_owner[inner] < mesh.face_neighbor[inner])
    # exterior normals point out of the owner
    ext = mesh.exterior
    fc = mesh.vertices[mesh.faces[ext]].mean(axis=1)
    assert np.all(np.einsum("fi,fi->f", fc - cen[mesh.face_owner[ext]], mesh.face_normal[ext]) > 0)


def test_local_face_convention():
    mesh = cube_mesh(1)
    for f in range(mesh.n_faces):
        K, loc = mesh.face_owner[f], mesh.face_owner_local[f]
        assert set(mesh.elements[K][LOCAL_FACES[loc]]) == set(mesh.faces[f])


def test_mesh_size_is_cube_diagonal():
    mesh = build_structured_mesh(Cuboid(), 4)
    assert np.isclose(mesh.h, np.sqrt(3) / 4)


def test_piecewise_medium_assignment():
    mesh = layered_mesh(2)
    left = mesh.centroids[:, 0] < 0.5
    assert np.all(mesh.eps[left] == 1.0) and np.all(mesh.eps[~left] == 3.0)
    assert np.all(mesh.mu[left] == 2.0) and np.all(mesh.mu[~left] == 1.0)
    assert not mesh.constant_medium


def test_break_not_on_grid_plane_rejected():
    med = MediumSpec(eps=np.array([1.0, 2.0]).reshape(2, 1, 1), mu=np.ones((2, 1, 1)), breaks=([0.3], [], []))
    with pytest.raises(MeshError):
        build_structured_mesh(Cuboid(), 2, med)


def test_nonpositive_medium_rejected():
    with pytest.raises((MeshError, ValueError)):
        build_structured_mesh(Cuboid(), 1, MediumSpec(eps=0.0, mu=1.0))
