import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochmaxwell.dg_space import project
from stochmaxwell.ldp import (INFINITE_RATE, brute_force_rate, full_rate_vectors, rate_exact, rate_full,
                              rate_full_details, rate_gap_table, rate_temporal)
from stochmaxwell.noise import commuting_noise_from_modes, projected_modes
from stochmaxwell.spectral import SpectralField, midpoint_blocks, rotation, tm_mode
from stochmaxwell.timestepper import MidpointSolver, propagate_deterministic

from conftest import cube_operator

MODE = tm_mode((1, 1))
OM = np.array([MODE.omega])
NOISE = commuting_noise_from_modes([MODE], [2.0])


def test_zero_displacement_has_zero_rate():
    u0 = SpectralField(OM, [[0.3, -0.2]])
    assert rate_exact(SpectralField(OM, np.einsum("bij,bj->bi", rotation(OM, 1.0), u0.coeffs)), u0, NOISE,
                      1.0) == pytest.approx(0.0, abs=1e-15)
    S, _ = midpoint_blocks(OM, 0.25)
    v = u0.coeffs
    for _ in range(4):
        v = np.einsum("bij,bj->bi", S, v)
    assert rate_temporal(SpectralField(OM, v), u0, NOISE, 1.0, 4) == pytest.approx(0.0, abs=1e-15)


def test_single_block_value():
    assert rate_exact(SpectralField(OM, [[1.0, 0.0]]), SpectralField.zeros(OM), NOISE, 1.0) == pytest.approx(0.25)


def test_outside_noise_span_is_infinite():
    two = SpectralField(np.array([MODE.omega, tm_mode((1, 2)).omega]), [[0.0, 0.0], [1.0, 0.0]])
    from stochmaxwell.experiments import SpectralSetup, _extended_noise

    setup = SpectralSetup([MODE, tm_mode((1, 2))], two.omegas, np.array([[2.0, 2.0], [0, 0]]), np.zeros((2, 2)))
    noise = _extended_noise(NOISE, setup)
    assert rate_exact(two, SpectralField.zeros(two.omegas), noise, 1.0) == INFINITE_RATE
    assert math.isinf(rate_temporal(two, SpectralField.zeros(two.omegas), noise, 1.0, 8))


@given(st.floats(0.05, 5.0), st.floats(-2, 2), st.floats(-2, 2))
def test_resolvent_inverse_amplification(tau, a, b):
    """With u0 = 0 the temporal rate is the exact rate of T_tau^{-1} v, amplified by 1 + (tau omega / 2)^2."""
    v = SpectralField(OM, [[a, b]])
    z = SpectralField.zeros(OM)
    N = 1
    factor = 1 + (0.5 * tau * OM[0]) ** 2
    assert rate_temporal(v, z, NOISE, tau, N) == pytest.approx(factor * rate_exact(v, z, NOISE, tau),
                                                               rel=1e-12, abs=1e-300)


def test_gap_table_quadratic_for_finite_rank():
    u0 = SpectralField(OM, [[0.3, 0.5]])
    v = SpectralField(OM, [[1.0, 0.5]])
    rows = np.array(rate_gap_table(v, u0, NOISE, 1.0, [2**p for p in range(2, 8)]))
    slope = np.polyfit(np.log(rows[:, 0]), np.log(rows[:, 3]), 1)[0]
    assert slope >= 0.9
    assert slope == pytest.approx(2.0, abs=0.05)


def _setup_full():
    op = cube_operator(1, pi=True)
    P = projected_modes(NOISE, op.mesh)
    u0 = project(MODE.u1, op.mesh).vector
    drift = propagate_deterministic(MidpointSolver(op, 0.25), u0, 4)[-1]
    Y = full_rate_vectors(op, P, NOISE.variances, 1.0, 4)
    return op, P, u0, drift, Y


def test_full_rate_zero_at_drift():
    op, P, u0, drift, _ = _setup_full()
    assert rate_full(drift, u0, op, P, NOISE.variances, 1.0, 4) <= 1e-20


def test_full_rate_matches_brute_force():
    op, P, u0, drift, Y = _setup_full()
    assert op.mesh.n_elements == 6
    for s, col in ((0.7, 3), (1.3, 0)):
        v = drift + s * Y[:, col]
        svd = rate_full_details(v, u0, op, P, NOISE.variances, 1.0, 4, vectors=Y).value
        brute = brute_force_rate(v - drift, Y)
        assert svd == pytest.approx(brute, rel=1e-8)
        assert np.isfinite(svd)


def test_full_rate_single_direction():
    """Along a left singular direction the rate is s^2 / (2 sigma^2) in the V-metric."""
    op, P, u0, drift, Y = _setup_full()
    Yt = op.mass.apply_sqrt(Y)
    U, s, _ = np.linalg.svd(Yt, full_matrices=False)
    # V-unit direction A^{-1/2} U[:, 0]
    direction = np.linalg.solve(op.mass.apply_sqrt(np.eye(op.n_dofs)), U[:, 0])
    val = rate_full(drift + 0.5 * direction, u0, op, P, NOISE.variances, 1.0, 4)
    assert val == pytest.approx(0.25 / (2 * s[0] ** 2), rel=1e-9)


def test_full_rate_off_range_is_infinite(rng):
    op, P, u0, drift, _ = _setup_full()
    assert rate_full(drift + rng.standard_normal(op.n_dofs), u0, op, P, NOISE.variances, 1.0, 4) == INFINITE_RATE
