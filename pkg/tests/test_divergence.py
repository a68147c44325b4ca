import numpy as np
import pytest

from stochmaxwell.dg_space import AnalyticField, DgField, project
from stochmaxwell.divergence import (basis_integral, build_test_space, choose_test_functions, divergence_report,
                                     weak_divergence, weak_divergence_all)
from stochmaxwell.noise import commuting_noise_from_modes, projected_modes
from stochmaxwell.spectral import tm_mode
from stochmaxwell.timestepper import run_path

from conftest import cube_mesh, cube_operator

LINEAR_X = AnalyticField(lambda x: np.concatenate([x[:, :1], np.zeros((len(x), 5))], axis=1))


def test_test_space_dimension():
    # interior vertices (n-1)^3 plus edges whose midpoints are interior
    X = build_test_space(cube_mesh(2))
    assert X.dim == 27
    assert int(np.sum(X.is_vertex(np.arange(X.dim)))) == 1


def test_constant_field_has_zero_weak_divergence():
    mesh = cube_mesh(2)
    X = build_test_space(mesh)
    u = project(AnalyticField(lambda x: np.tile([1.0, -2.0, 0.5, 3.0, 0.0, 1.0], (len(x), 1))), mesh)
    for part in ("E", "H"):
        assert np.abs(weak_divergence_all(u.vector, X, part)).max() <= 1e-12


def test_linear_field_gives_basis_integral():
    mesh = cube_mesh(2)
    X = build_test_space(mesh)
    u = project(LINEAR_X, mesh)
    is_vertex = X.is_vertex(np.arange(X.dim))
    for k in (int(np.flatnonzero(is_vertex)[0]), int(np.flatnonzero(~is_vertex)[0])):
        assert weak_divergence(u, X, k) == pytest.approx(basis_integral(X, k, degree=6), rel=1e-12)
    # P2 edge functions integrate to a positive value (vertex ones to a negative one)
    edge = int(np.flatnonzero(~is_vertex)[0])
    assert weak_divergence(u, X, edge) > 0


def test_vectorized_matches_single():
    mesh = cube_mesh(2)
    X = build_test_space(mesh)
    u = DgField(mesh, np.random.default_rng(0).standard_normal(mesh.n_dofs))
    allv = weak_divergence_all(u.vector, X, "H")[0]
    assert allv[5] == pytest.approx(weak_divergence(u, X, 5, "H"), rel=1e-12)


def test_projected_mode_is_weakly_divergence_free():
    mesh = cube_mesh(3, pi=True)
    X = build_test_space(mesh)
    mode = tm_mode((1, 2))
    for u in (mode.u1, mode.u2):
        rep = divergence_report(project(u, mesh, degree=12).vector[None], X, np.arange(X.dim))
        assert rep.max_per_step().max() <= 1e-10


def test_scheme_conserves_weak_divergence():
    mesh = cube_mesh(3, pi=True)
    op = cube_operator(3, pi=True)
    noise = commuting_noise_from_modes([tm_mode((1, 1)), tm_mode((2, 1))], [0.5, 0.2])
    P = projected_modes(noise, mesh, degree=12)
    X = build_test_space(mesh)
    cols = np.arange(X.dim)
    tr = run_path(op, noise, project(tm_mode((1, 1)).u1, mesh, 12), 1.0, 10, seed=3, P=P)
    rep = divergence_report(tr.states, X, cols)
    assert rep.max_per_step().max() <= 1e-9
    bad = run_path(op, noise, project(LINEAR_X, mesh, 12), 1.0, 10, seed=3, P=P)
    rep_bad = divergence_report(bad.states, X, cols)
    assert rep_bad.max_per_step()[0] > 1e-3
    assert rep_bad.drift_per_step().max() <= 1e-9


def test_test_function_selection_is_seeded():
    X = build_test_space(cube_mesh(4))
    a = choose_test_functions(X, 200, seed=1)
    assert np.array_equal(a, choose_test_functions(X, 200, seed=1))
    assert len(a) >= 200
    assert len(np.unique(a)) == len(a)


def test_report_csv(tmp_path):
    mesh = cube_mesh(2)
    X = build_test_space(mesh)
    rep = divergence_report(project(LINEAR_X, mesh).vector[None], X, np.arange(3))
    p = tmp_path / "div.csv"
    rep.write_csv(str(p))
    lines = p.read_text().splitlines()
    assert lines[0] == "step,basis_id,part,residual,scale"
    assert len(lines) == 1 + 3 * 2
