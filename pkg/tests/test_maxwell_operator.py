import os

import numpy as np
import pytest
import scipy.io
from hypothesis import given, strategies as st

from stochmaxwell.dg_space import AnalyticField, DgField, project
from stochmaxwell.maxwell_operator import (assemble, cross_matrix, dissipation_face_sum, flux_coefficients,
                                           mixed_form, mixed_load)
from stochmaxwell.spectral import tm_mode

from conftest import cube_mesh, cube_operator, layered_mesh


def test_flux_weights_symmetric_medium():
    fc = flux_coefficients(1.0, 1.0, 1.0, 1.0)
    assert np.allclose([fc.alpha_K, fc.beta_K, fc.gamma, fc.delta], 0.5)


def test_flux_weights_contrast():
    fc = flux_coefficients(1.0, 1.0, 4.0, 1.0)
    assert np.allclose([fc.alpha_K, fc.beta_K, fc.gamma, fc.delta], [2 / 3, 1 / 3, 2 / 3, 1 / 3], atol=1e-15)


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10))
def test_flux_weights_partition_of_unity(e1, m1, e2, m2):
    fc = flux_coefficients(e1, m1, e2, m2)
    assert np.isclose(fc.alpha_K + fc.alpha_KF, 1.0)
    assert np.isclose(fc.beta_K + fc.beta_KF, 1.0)
    assert fc.gamma > 0 and fc.delta > 0


def test_flux_rejects_nonpositive_medium():
    with pytest.raises(ValueError):
        flux_coefficients(-1.0, 1.0, 1.0, 1.0)


def test_cross_matrix():
    n = np.array([0.3, -1.2, 0.5])
    x = np.array([1.0, 2.0, -0.7])
    assert np.allclose(cross_matrix(n) @ x, np.cross(n, x))


@pytest.mark.parametrize("mesh_fn", [lambda: cube_mesh(1), lambda: layered_mesh(2), lambda: cube_mesh(3)])
def test_dissipativity_and_face_sum(mesh_fn, rng):
    mesh = mesh_fn()
    op = assemble(mesh)
    for _ in range(20):
        u = DgField(mesh, rng.standard_normal(mesh.n_dofs))
        q = op.bilinear(u, u)
        d = dissipation_face_sum(u)
        assert q <= 1e-12
        assert abs(q + d) <= 1e-11 * d


@pytest.mark.parametrize("mesh_fn", [lambda: cube_mesh(1), lambda: layered_mesh(2)])
def test_mixed_form_matches_assembly(mesh_fn, rng):
    mesh = mesh_fn()
    op = assemble(mesh)
    for _ in range(5):
        u = DgField(mesh, rng.standard_normal(mesh.n_dofs))
        v = DgField(mesh, rng.standard_normal(mesh.n_dofs))
        a, b = mixed_form(u, v), op.bilinear(u, v)
        assert abs(a - b) <= 1e-10 * abs(b)


def _curl_of_linear(vals, grads):
    J = vals @ grads  # J[c, d] = dF_c / dx_d
    return np.array([J[2, 1] - J[1, 2], J[0, 2] - J[2, 0], J[1, 0] - J[0, 1]])


def test_consistency_on_continuous_piecewise_linear_field():
    """E a continuous hat times a vector, H globally linear: M_h u equals the elementwise M u."""
    mesh = layered_mesh(2)
    op = assemble(mesh)
    vid = int(np.argmin(np.linalg.norm(mesh.vertices - 0.5, axis=1)))
    a = np.array([1.0, -2.0, 0.5])
    c = np.zeros((mesh.n_elements, 6, 4))
    x = mesh.vertices[mesh.elements]  # (ne, 4, 3)
    c[:, :3, :] = np.where(mesh.elements[:, None, :] == vid, a[None, :, None], 0.0)
    c[:, 3:, :] = np.stack([x[..., 1], 2 * x[..., 2] - x[..., 0], x[..., 0] + x[..., 1]], axis=1)
    u = DgField(mesh, c)
    grads = mesh.barycentric_gradients()
    expect = np.zeros_like(c)
    for K in range(mesh.n_elements):
        expect[K, :3] = (_curl_of_linear(c[K, 3:], grads[K]) / mesh.eps[K])[:, None]
        expect[K, 3:] = (-_curl_of_linear(c[K, :3], grads[K]) / mesh.mu[K])[:, None]
    assert np.abs(op.apply(u).coeffs - expect).max() <= 1e-10 * np.abs(expect).max()


def test_consistency_on_cavity_mode():
    mesh = cube_mesh(3, pi=True)
    op = cube_operator(3, pi=True)
    mode = tm_mode((1, 1))
    # M u1 = -omega u2 for the normalized pair
    lhs = op.mass.solve(mixed_load(mode.u1, mesh, degree=10))
    rhs = project(mode.u2.scaled(-mode.omega), mesh, degree=10).vector
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_operator_application_paths_agree(rng):
    op = cube_operator(2)
    x = rng.standard_normal(op.n_dofs)
    assert np.allclose(op.apply(x), op.mass.solve(op.B @ x), atol=1e-12)
    assert np.allclose(op.to_dense() @ x, op.apply(x), atol=1e-10)


def test_matrix_market_roundtrip(tmp_path):
    op = cube_operator(1)
    pa, pb = op.export_matrix_market(str(tmp_path))
    assert os.path.exists(pa) and os.path.exists(pb)
    assert abs(scipy.io.mmread(pb).tocsr() - op.B).max() <= 1e-15
    assert abs(scipy.io.mmread(pa).tocsr() - op.A).max() <= 1e-15


def test_gradient_fields_are_annihilated_up_to_dissipation(rng):
    """For E = grad(phi) with phi continuous P2 (zero trace) and H = 0, <M_h u, v> has no volume curl term."""
    from stochmaxwell.divergence import build_test_space

    mesh = cube_mesh(2)
    op = cube_operator(2)
    X = build_test_space(mesh)
    g = X.gradient_field(int(rng.integers(X.dim)), "E")
    # curl of a gradient vanishes and tangential jumps vanish: M_h g = 0 exactly
    assert np.abs(op.apply(g.vector)).max() <= 1e-10 * max(1.0, np.abs(g.vector).max())
