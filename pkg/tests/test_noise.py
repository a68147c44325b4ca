import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmaxwell.dg_space import AnalyticField
from stochmaxwell.noise import (NoiseModel, aggregate, commuting_noise_from_modes, critical_mixture,
                                projected_modes, refine_path, sample_path, standard_normals, uniform_grid)
from stochmaxwell.spectral import tm_mode

from conftest import cube_mesh

ONE_MODE = commuting_noise_from_modes([tm_mode((1, 1))], [0.5])


def test_single_pair_trace():
    assert ONE_MODE.trace == pytest.approx(1.0)
    assert ONE_MODE.n_modes == 2


def test_increment_moments():
    tau, n = 0.01, 100_000
    path = sample_path(ONE_MODE, uniform_grid(tau * n, n), seed=7)
    xi = path.increments
    q = ONE_MODE.variances
    assert np.all(np.abs(xi.mean(axis=0)) <= 4 * np.sqrt(tau * q / n))
    assert np.all(np.abs(xi.var(axis=0) / (tau * q) - 1) <= 0.05)


def test_same_seed_same_path_distinct_indices():
    grid = uniform_grid(1.0, 16)
    a = sample_path(ONE_MODE, grid, 3, 5)
    b = sample_path(ONE_MODE, grid, 3, 5)
    c = sample_path(ONE_MODE, grid, 3, 6)
    assert np.array_equal(a.values, b.values)
    assert not np.any(a.increments == c.increments)


@given(st.sampled_from([2, 3, 4, 5, 8, 12]), st.integers(1, 6), st.integers(0, 1000))
def test_refine_then_aggregate_is_identity(factor, N, index):
    path = sample_path(ONE_MODE, uniform_grid(1.0, N), 11, index)
    fine = refine_path(path, factor)
    assert fine.n_steps == factor * N
    back = aggregate(fine, factor)
    assert np.array_equal(back.increments, path.increments)
    assert np.array_equal(back.times, path.times)


def test_two_bisections_equal_refinement_by_four():
    path = sample_path(ONE_MODE, uniform_grid(1.0, 8), 1, 2)
    assert np.array_equal(refine_path(refine_path(path, 2), 2).values, refine_path(path, 4).values)


@pytest.mark.parametrize("factor", [4, 3])
def test_refined_increment_variance(factor):
    N = 2000
    path = sample_path(ONE_MODE, uniform_grid(1.0, N), 21)
    fine = refine_path(path, factor)
    tau = 1.0 / (N * factor)
    v = fine.increments.var(axis=0) / (tau * ONE_MODE.variances)
    # 2 * N * factor samples: chi-square relative spread ~ 1.2%
    assert np.all(np.abs(v - 1) <= 0.05)


def test_standard_normals_are_keyed():
    a = standard_normals(1, (0, 0), (5,))
    assert np.array_equal(a, standard_normals(1, (0, 0), (5,)))
    assert not np.array_equal(a, standard_normals(1, (0, 1), (5,)))
    assert not np.array_equal(a, standard_normals(2, (0, 0), (5,)))


def test_commuting_requires_constant_medium():
    with pytest.raises(ValueError):
        commuting_noise_from_modes([tm_mode((1, 1))], [1.0], medium_constant=False)


def test_variances_must_be_positive():
    f = AnalyticField(lambda x: np.zeros((len(x), 6)))
    with pytest.raises(ValueError):
        NoiseModel((f,), [0.0])


@pytest.mark.parametrize("k", [1, 2])
def test_critical_mixture_trace_and_decay(k):
    noise = critical_mixture(k, 16, trace=1.0)
    assert noise.trace == pytest.approx(1.0, rel=1e-14)
    q = noise.block_variances()[:, 0]
    omega = np.array([m.omega for m in noise.cavity_modes])
    # the D(M^k) weighted sum converges while the D(M^(k+1)) one grows with the truncation
    assert np.all(np.diff(q) < 0)
    j = np.arange(1, 17)
    assert np.allclose(q * omega ** (2 * k) * j, q[0] * omega[0] ** (2 * k) * j ** (-0.1), rtol=1e-12)


def test_projected_modes_shape():
    P = projected_modes(ONE_MODE, cube_mesh(1, pi=True))
    assert P.shape == (cube_mesh(1, pi=True).n_dofs, 2)


def test_grid_validation():
    with pytest.raises(ValueError):
        uniform_grid(1.0, 0)
    with pytest.raises(ValueError):
        sample_path(ONE_MODE, [0.0, 0.5, 0.5], 0)
