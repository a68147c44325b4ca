import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmaxwell.dg_space import (AnalyticField, DgField, broken_seminorm, error_norm_V, face_error_norm, face_jump,
                                   inner_product_V, mass_structure, norm_V, project)
from stochmaxwell.mesh import Cuboid, MediumSpec, build_structured_mesh

from conftest import cube_mesh, layered_mesh


def field_from(fn):
    return AnalyticField(lambda x: np.stack(fn(x), axis=1))


zero = lambda x: np.zeros(len(x))  # noqa: E731


def test_constant_field_weighted_norm():
    mesh = build_structured_mesh(Cuboid(), 2, MediumSpec(eps=2.0, mu=1.0))
    u = project(field_from(lambda x: [x[:, 0] * 0 + 1, zero(x), zero(x), zero(x), zero(x), zero(x)]), mesh)
    assert np.isclose(inner_product_V(u, u), 2.0, rtol=1e-13)


def test_linear_field_norm_is_one_third():
    mesh = cube_mesh(2)
    u = project(field_from(lambda x: [x[:, 0], zero(x), zero(x), zero(x), zero(x), zero(x)]), mesh)
    assert np.isclose(norm_V(u) ** 2, 1.0 / 3.0, rtol=1e-13)


@given(st.integers(0, 2**31 - 1))
def test_inner_product_symmetric(seed):
    mesh = layered_mesh(2)
    rng = np.random.default_rng(seed)
    u = DgField(mesh, rng.standard_normal(mesh.n_dofs))
    v = DgField(mesh, rng.standard_normal(mesh.n_dofs))
    a, b = inner_product_V(u, v), inner_product_V(v, u)
    assert abs(a - b) <= 1e-13 * max(abs(a), 1.0)


@given(st.integers(0, 2**31 - 1))
def test_mass_inverse_and_sqrt(seed):
    mesh = layered_mesh(2)
    mass = mass_structure(mesh)
    x = np.random.default_rng(seed).standard_normal(mesh.n_dofs)
    assert np.allclose(mass.solve(mass.apply(x)), x, atol=1e-12)
    r = mass.apply_sqrt(x)
    assert np.isclose(r @ r, x @ mass.apply(x), rtol=1e-12)


def test_projection_reproduces_linear_fields():
    mesh = cube_mesh(2)
    coef = np.arange(1.0, 19.0).reshape(6, 3)
    f = AnalyticField(lambda x: x @ coef.T + 0.5)
    u = project(f, mesh)
    nodal = f(mesh.vertices[mesh.elements].reshape(-1, 3)).reshape(mesh.n_elements, 4, 6).transpose(0, 2, 1)
    assert np.abs(u.coeffs - nodal).max() <= 1e-12 * np.abs(nodal).max()


def test_projection_idempotent():
    mesh = cube_mesh(2)
    f = field_from(lambda x: [np.sin(3 * x[:, 0]), np.cos(x[:, 1]), x[:, 2] ** 3, zero(x), np.exp(x[:, 0]), zero(x)])
    u = project(f, mesh)
    g = AnalyticField(lambda x: _eval_dg(u, x))
    assert np.abs(project(g, mesh, degree=4).vector - u.vector).max() <= 1e-12


def _eval_dg(u, x):
    """Evaluate a dG field at points of the unit-cube mesh (points assumed inside element interiors)."""
    mesh = u.mesh
    verts = mesh.vertices[mesh.elements]
    jac = (verts[:, 1:] - verts[:, :1]).transpose(0, 2, 1)
    inv = np.linalg.inv(jac)
    rel = np.einsum("kij,pkj->pki", inv, x[:, None, :] - verts[None, :, 0])
    lam = np.concatenate([1 - rel.sum(-1, keepdims=True), rel], -1)
    elem = np.argmax(lam.min(-1), axis=1)
    return u(elem, lam[np.arange(len(x)), elem])


def test_projection_error_order_two():
    f = field_from(lambda x: [zero(x), zero(x), np.sin(x[:, 0]) * np.sin(x[:, 1]), zero(x), zero(x), zero(x)])
    errs = []
    for n in (4, 8):
        mesh = cube_mesh(n, pi=True)
        errs.append(error_norm_V(f, project(f, mesh), mesh))
    assert 3.6 <= errs[0] / errs[1] <= 4.4


def test_jump_of_continuous_field_vanishes():
    mesh = cube_mesh(2)
    u = project(field_from(lambda x: [x[:, 0], x[:, 1] * x[:, 0] * 0, zero(x), x[:, 2], zero(x), zero(x)]), mesh)
    for f in mesh.interior:
        assert np.abs(face_jump(u, f)).max() <= 1e-13


def test_jump_sign_convention():
    mesh = cube_mesh(1)
    f = int(mesh.interior[0])
    c = np.zeros((mesh.n_elements, 6, 4))
    c[mesh.face_neighbor[f]] = 1.0
    assert np.allclose(face_jump(DgField(mesh, c), f), 1.0)
    # swapping roles flips the sign (and the normal flips with it)
    c2 = np.zeros_like(c)
    c2[mesh.face_owner[f]] = 1.0
    assert np.allclose(face_jump(DgField(mesh, c2), f), -1.0)


def test_jump_on_exterior_face_raises():
    mesh = cube_mesh(1)
    with pytest.raises(ValueError):
        face_jump(DgField.zeros(mesh), int(mesh.exterior[0]))


def test_broken_seminorms():
    mesh = cube_mesh(2)
    const = field_from(lambda x: [x[:, 0] * 0 + 1] + [zero(x)] * 5)
    lin = field_from(lambda x: [x[:, 0]] + [zero(x)] * 5)
    assert broken_seminorm(const, mesh, 1) <= 1e-8
    assert np.isclose(broken_seminorm(lin, mesh, 1), 1.0, rtol=1e-8)
    assert broken_seminorm(lin, mesh, 2) <= 1e-6
    exact = AnalyticField(lin.func, jacobian=lambda x: np.broadcast_to(
        np.eye(6, 3)[None] * np.array([1, 0, 0, 0, 0, 0])[None, :, None], (len(x), 6, 3)),
        hessian=lambda x: np.zeros((len(x), 6, 3, 3)))
    assert np.isclose(broken_seminorm(exact, mesh, 1), 1.0, rtol=1e-13)
    assert broken_seminorm(exact, mesh, 2) <= 1e-12


def test_nonfinite_projection_rejected():
    with pytest.raises(FloatingPointError):
        project(field_from(lambda x: [x[:, 0] * np.inf] + [zero(x)] * 5), cube_mesh(1))


def test_face_error_norm_of_constant_is_total_face_area():
    mesh = cube_mesh(1)
    one = field_from(lambda x: [x[:, 0] * 0 + 1] + [zero(x)] * 5)
    # exterior faces once (area 6), interior faces from both sides
    expect = 6.0 + 2.0 * mesh.face_area[mesh.interior].sum()
    assert face_error_norm(one, None, mesh) ** 2 == pytest.approx(expect, rel=1e-13)
    assert face_error_norm(one, project(one, mesh), mesh) <= 1e-13
