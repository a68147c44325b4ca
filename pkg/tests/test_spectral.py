import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmaxwell.dg_space import analytic_norm_V
from stochmaxwell.noise import commuting_noise_from_modes, refine_path, sample_path, uniform_grid
from stochmaxwell.spectral import (SpectralField, exact_flow, exact_flow_trajectory, expected_ms_error,
                                   midpoint_blocks, midpoint_spectral_step, reference_bias, rotation,
                                   run_midpoint_spectral, semigroup_error, tm_mode)

from conftest import cube_mesh

# E||u(1) - u^4||^2 for one block (omega = sqrt(2), q = 1/2 per member, u0 = (1, 0)),
# frozen from adaptive quadrature of the Ito isometry with explicit 2x2 matrices
FROZEN_MS_ERROR_N4 = 0.010751065022065671


def _fd_curl(f, x, h=1e-6):
    J = np.empty((len(x), 6, 3))
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        J[:, :, d] = (f(x + e) - f(x - e)) / (2 * h)

    def curl(J3):
        return np.stack([J3[:, 2, 1] - J3[:, 1, 2], J3[:, 0, 2] - J3[:, 2, 0], J3[:, 1, 0] - J3[:, 0, 1]], axis=1)

    return np.concatenate([curl(J[:, :3]), curl(J[:, 3:])], axis=1), J[:, 0, 0] + J[:, 1, 1] + J[:, 2, 2], \
        J[:, 3, 0] + J[:, 4, 1] + J[:, 5, 2]


@pytest.mark.parametrize("mn", [(1, 1), (1, 2), (3, 2)])
def test_mode_curls_and_divergence(mn):
    mode = tm_mode(mn)
    x = np.random.default_rng(0).uniform(0.1, np.pi - 0.1, size=(100, 3))
    for u in (mode.u1, mode.u2):
        curl, dE, dH = _fd_curl(u, x)
        assert np.abs(curl - u.curl(x)).max() <= 1e-7
        assert np.abs(dE).max() <= 1e-7 and np.abs(dH).max() <= 1e-7
    # block relations: curl H of u2 / eps = omega * E of u1, -curl E of u1 / mu = -omega * H of u2
    assert np.allclose(mode.u2.curl(x)[:, 3:], mode.omega * mode.u1(x)[:, :3])
    assert np.allclose(mode.u1.curl(x)[:, :3], mode.omega * mode.u2(x)[:, 3:])


def test_first_mode_formula():
    mode = tm_mode((1, 1))
    assert mode.omega == pytest.approx(np.sqrt(2))
    x = np.array([[0.3, 1.1, 2.0]])
    c = mode.u1(x)[0, 2] / (np.sin(0.3) * np.sin(1.1))
    expect_H = c / np.sqrt(2) * np.array([np.sin(0.3) * np.cos(1.1), -np.cos(0.3) * np.sin(1.1), 0.0])
    assert np.allclose(mode.u2(x)[0, 3:], expect_H)


def test_boundary_conditions():
    mode = tm_mode((2, 1))
    rng = np.random.default_rng(1)
    worst = 0.0
    for axis in range(3):
        for side in (0.0, np.pi):
            x = rng.uniform(0, np.pi, size=(200, 3))
            x[:, axis] = side
            n = np.zeros(3)
            n[axis] = 1.0
            for u in (mode.u1, mode.u2):
                v = u(x)
                worst = max(worst, np.abs(np.cross(n, v[:, :3])).max(), np.abs(v[:, 3:] @ n).max())
    assert worst <= 1e-12


def test_mode_normalization_by_quadrature():
    mesh = cube_mesh(4, pi=True)
    for mode in (tm_mode((1, 1)), tm_mode((2, 3))):
        for u in (mode.u1, mode.u2):
            assert analytic_norm_V(u, mesh, degree=14) ** 2 == pytest.approx(1.0, abs=1e-8)


def test_unnormalized_pair_norm():
    mode = tm_mode((1, 1))
    c = mode.u1(np.array([[np.pi / 2, np.pi / 2, 0.0]]))[0, 2]
    # ||(E, H)||^2 of the unnormalized pair (E part plus H part) is pi^3/2
    assert (1.0 / c**2) * 2 == pytest.approx(np.pi**3 / 2, rel=1e-13)


def test_half_rotation():
    u0 = SpectralField([np.sqrt(2)], [[1.0, 0.0]])
    out = exact_flow(u0, None, None, np.pi / np.sqrt(2))
    assert np.allclose(out.coeffs, [[-1.0, 0.0]], atol=1e-15)


@given(st.floats(1e-3, 10.0), st.floats(0.1, 50.0))
def test_midpoint_block_is_symplectic_and_contractive(tau, omega):
    S, T = midpoint_blocks(omega, tau)
    assert abs(np.linalg.det(S) - 1) <= 1e-14
    assert np.linalg.norm(T, 2) <= 1 + 1e-12
    assert np.allclose(S.T @ S, np.eye(2), atol=1e-14)


def test_quarter_turn_case():
    S, T = midpoint_blocks(2.0, 1.0)
    assert np.allclose(S, rotation(1.0, np.pi / 2), atol=1e-15)
    assert np.linalg.norm(T, 2) == pytest.approx(1 / np.sqrt(2))


@given(st.floats(1e-3, 2.0), st.floats(0.1, 20.0), st.floats(-1, 1), st.floats(-1, 1))
def test_resolvent_defect_identity(tau, omega, a, b):
    _, T = midpoint_blocks(omega, tau)
    J = np.array([[0.0, 1.0], [-1.0, 0.0]]) * omega  # M in block coordinates (S(t) = exp(t M))
    v = np.array([a, b])
    lhs = np.linalg.norm(v - T @ v)
    rhs = 0.5 * tau * np.linalg.norm(T @ J @ v)
    assert abs(lhs - rhs) <= 1e-13


def test_angle_gap_oracle():
    v = SpectralField([1.0], [[1.0, 0.0]])
    gap = 0.1 - 2 * np.arctan(0.05)
    assert gap == pytest.approx(8.32e-5, rel=1e-3)
    assert semigroup_error(v, 0.1, 1) == pytest.approx(2 * abs(np.sin(gap / 2)), rel=1e-12)
    # direct: rotate with both propagators
    S, _ = midpoint_blocks(1.0, 0.1)
    assert semigroup_error(v, 0.1, 1) == pytest.approx(np.linalg.norm(rotation(1.0, 0.1) @ [1, 0] - S @ [1, 0]),
                                                       rel=1e-9)


def test_single_mode_error_slope_two_and_monotone():
    v = SpectralField([np.sqrt(2)], [[1.0, 0.0]])
    Ns = [4, 8, 16, 32, 64]
    errs = [semigroup_error(v, 1.0 / N, N) for N in Ns]
    slope = np.polyfit(np.log(1.0 / np.array(Ns)), np.log(errs), 1)[0]
    assert abs(slope - 2) <= 0.05
    assert np.all(np.diff(errs) < 0)


def test_expected_error_frozen_oracle():
    val = expected_ms_error([np.sqrt(2)], [[0.5, 0.5]], [[1.0, 0.0]], 1.0, 4)
    assert val[0] == 0.0
    assert val[-1] == pytest.approx(FROZEN_MS_ERROR_N4, rel=1e-12)


def test_spectral_step_agrees_with_batch_run():
    noise = commuting_noise_from_modes([tm_mode((1, 1)), tm_mode((2, 1))], [0.3, 0.1])
    u0 = SpectralField(noise_omegas(noise), [[1.0, 0.0], [0.0, 0.5]])
    path = sample_path(noise, uniform_grid(1.0, 8), 4)
    traj = run_midpoint_spectral(u0, noise, path.increments, 1.0 / 8)
    u = u0
    for n in range(8):
        inc = np.zeros((2, 2))
        inc[noise.blocks[:, 0], noise.blocks[:, 1]] = path.increments[n]
        u = midpoint_spectral_step(u, 1.0 / 8, inc)
    assert np.allclose(traj[-1], u.coeffs, atol=1e-14)


def noise_omegas(noise):
    return np.array([m.omega for m in noise.cavity_modes])


def test_exact_flow_refinement_consistent():
    noise = commuting_noise_from_modes([tm_mode((1, 1))], [0.5])
    u0 = SpectralField(noise_omegas(noise), [[1.0, 0.0]])
    path = sample_path(noise, uniform_grid(1.0, 4), 9)
    a = exact_flow(u0, noise, path, 1.0, refinement=64)
    b = exact_flow_trajectory(u0, noise, refine_path(path, 64).increments, 1.0 / 256, stride=64)[-1]
    assert np.allclose(a.coeffs, b, atol=1e-14)


def _zero_start_energy(T, n_paths, steps, seed):
    noise = commuting_noise_from_modes([tm_mode((1, 1)), tm_mode((1, 2))], [0.3, 0.2])  # Tr(Q) = 1
    u0 = SpectralField.zeros(noise_omegas(noise))
    inc = np.stack([sample_path(noise, uniform_grid(T, steps), seed, p).increments for p in range(n_paths)])
    return noise, exact_flow_trajectory(u0, noise, inc, T / steps)


def test_energy_grows_linearly_with_trace():
    noise, traj = _zero_start_energy(2.0, 2000, 64, 17)
    e = np.sum(traj[:, -1] ** 2, axis=(-2, -1))
    assert abs(e.mean() - 2.0 * noise.trace) <= 3 * e.std(ddof=1) / np.sqrt(len(e))


def test_covariance_of_convolution_is_T_times_q():
    noise, traj = _zero_start_energy(1.0, 4000, 64, 5)
    x = traj[:, -1].reshape(len(traj), -1)
    cov = x.T @ x / len(x)
    q = noise.block_variances().reshape(-1)
    # each diagonal entry has MC standard error ~ q T sqrt(2 / n)
    assert np.all(np.abs(np.diag(cov) - q) <= 4 * q * np.sqrt(2 / len(x)))


def test_increment_holder_scaling():
    noise, traj = _zero_start_energy(1.0, 1000, 128, 8)
    lags = [16, 8, 4, 2, 1]  # |t - s| = 2^-3 .. 2^-7
    ms = [np.mean(np.sum((traj[:, 64 + k] - traj[:, 64]) ** 2, axis=(-2, -1))) for k in lags]
    slope = np.polyfit(np.log(np.array(lags) / 128), np.log(ms), 1)[0]
    assert slope >= 0.9


def test_reference_bias_decreases_with_refinement():
    a = reference_bias([np.sqrt(2), 5.0], [[0.5, 0.5], [0.1, 0.1]], 1.0, 1 / 256)
    b = reference_bias([np.sqrt(2), 5.0], [[0.5, 0.5], [0.1, 0.1]], 1.0, 1 / 1024)
    assert b < a / 3.9
