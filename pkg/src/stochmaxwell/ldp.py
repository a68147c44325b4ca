"""Gaussian large-deviation rate functionals of the exact, temporal and full schemes.

For a centred Gaussian ``G`` with covariance ``C`` the rate of ``sqrt(lambda) G``
at ``d`` is ``(1/2) <C^+ d, d>``, finite only if ``d`` lies in the range of
``C``. Infinite values are returned as :data:`INFINITE_RATE` (``math.inf``),
never through floating overflow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .maxwell_operator import DiscreteMaxwellOperator
from .noise import NoiseModel
from .spectral import SpectralField, midpoint_blocks, rotation
from .timestepper import DENSE_SIZE_LIMIT, MidpointSolver, propagate_deterministic, propagate_modes

__all__ = [
    "INFINITE_RATE",
    "RANK_TOL",
    "RateResult",
    "rate_exact",
    "rate_temporal",
    "rate_full",
    "rate_full_details",
    "full_rate_vectors",
    "brute_force_rate",
    "rate_gap_table",
    "write_rate_table",
]

INFINITE_RATE = math.inf
RANK_TOL = 1e-10
_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class RateResult:
    value: float
    rank: int
    n_vectors: int
    range_residual: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)


def _block_q(noise: NoiseModel, n_blocks: int) -> np.ndarray:
    if not noise.commuting_with_M or noise.blocks is None:
        raise ValueError("closed-form rates need noise aligned with cavity blocks")
    q = noise.block_variances()
    if q.shape[0] != n_blocks:
        raise ValueError("spectral field and noise model have different block counts")
    return q


def _diag_rate(w: np.ndarray, q: np.ndarray, T: float, scale: float) -> float:
    on = q > 0
    if np.any(np.abs(w[~on]) > _RANGE_TOL * max(scale, 1.0)):
        return INFINITE_RATE
    return float(np.sum(w[on] ** 2 / q[on]) / (2.0 * T))


def rate_exact(v: SpectralField, u0: SpectralField, noise: NoiseModel, T: float) -> float:
    """``(1/2T) ||Q^{-1/2} (v - S(T) u0)||^2`` for noise commuting with ``M``."""
    q = _block_q(noise, len(v.omegas))
    d = v.coeffs - np.einsum("bij,bj->bi", rotation(u0.omegas, T), u0.coeffs)
    return _diag_rate(d, q, T, float(np.abs(v.coeffs).max(initial=0.0)))


def rate_temporal(v: SpectralField, u0: SpectralField, noise: NoiseModel, T: float, N: int) -> float:
    """``(1/2T) ||Q^{-1/2} T_tau^{-1} (v - S_tau^N u0)||^2`` with ``T_tau^{-1} = I - tau/2 M``."""
    q = _block_q(noise, len(v.omegas))
    tau = T / N
    S, _ = midpoint_blocks(u0.omegas, tau)
    SN = np.stack([np.linalg.matrix_power(s, N) for s in S]) if len(S) else S
    d = v.coeffs - np.einsum("bij,bj->bi", SN, u0.coeffs)
    c = 0.5 * tau * v.omegas
    Tinv = np.stack([np.stack([np.ones_like(c), -c], -1), np.stack([c, np.ones_like(c)], -1)], -2)
    w = np.einsum("bij,bj->bi", Tinv, d)
    return _diag_rate(w, q, T, float(np.abs(v.coeffs).max(initial=0.0)))


def full_rate_vectors(op: DiscreteMaxwellOperator, P: np.ndarray, variances: np.ndarray, T: float, N: int,
                      solver: Optional[MidpointSolver] = None) -> np.ndarray:
    """Columns ``sqrt(tau q_k) S^{N-j} T P e_k`` whose Gram matrix gives the full covariance.

    Returns ``(N_h, N * m)``; the noise term of the scheme at ``T`` is a
    standard Gaussian combination of these columns.
    """
    tau = T / N
    if solver is None:
        solver = MidpointSolver(op, tau)
    Y = propagate_modes(solver, P, N)  # (N, N_h, m)
    Y = Y * np.sqrt(tau * np.asarray(variances))[None, None, :]
    return np.concatenate(list(Y), axis=1)


def rate_full_details(v: np.ndarray, u0: np.ndarray, op: DiscreteMaxwellOperator, P: np.ndarray,
                      variances: np.ndarray, T: float, N: int, rank_tol: float = RANK_TOL,
                      vectors: Optional[np.ndarray] = None) -> RateResult:
    """Full-discretization rate via the SVD of the propagated noise vectors in the V-metric."""
    if op.n_dofs > DENSE_SIZE_LIMIT:
        raise ValueError(f"dense covariance limited to N_h <= {DENSE_SIZE_LIMIT} (got {op.n_dofs})")
    tau = T / N
    solver = MidpointSolver(op, tau)
    if vectors is None:
        vectors = full_rate_vectors(op, P, variances, T, N, solver)
    drift = propagate_deterministic(solver, np.asarray(u0, dtype=float), N)[-1]
    d = np.asarray(v, dtype=float) - drift
    Yt = op.mass.apply_sqrt(vectors)  # A^{1/2} Y: Euclidean coordinates of the V-metric
    dt = op.mass.apply_sqrt(d)
    U, s, Vt = np.linalg.svd(Yt, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        nd = float(np.linalg.norm(dt))
        return RateResult(0.0 if nd == 0 else INFINITE_RATE, 0, vectors.shape[1], nd)
    r = int(np.sum(s > rank_tol * s[0]))
    coef = U[:, :r].T @ dt
    resid = float(np.linalg.norm(dt - U[:, :r] @ coef))
    scale = max(float(np.linalg.norm(dt)), float(s[0]))
    if resid > _RANGE_TOL * scale:
        return RateResult(INFINITE_RATE, r, vectors.shape[1], resid)
    z = coef / s[:r]
    return RateResult(0.5 * float(z @ z), r, vectors.shape[1], resid)


def rate_full(v, u0, op: DiscreteMaxwellOperator, P: np.ndarray, variances: np.ndarray, T: float, N: int,
              rank_tol: float = RANK_TOL) -> float:
    """``(1/2) <Q_{T;N,h}^+ d, d>_V`` with ``d = v - S_{h,tau}^N u0``."""
    v = getattr(v, "vector", v)
    u0 = getattr(u0, "vector", u0)
    return rate_full_details(v, u0, op, P, variances, T, N, rank_tol).value


def brute_force_rate(d: np.ndarray, vectors: np.ndarray, rank_tol: float = RANK_TOL) -> float:
    """Oracle: dense coefficient covariance ``C = Y Y^T`` and ``(1/2) d^T C^+ d`` by eigendecomposition."""
    C = vectors @ vectors.T
    lam, V = np.linalg.eigh(C)
    top = lam.max(initial=0.0)
    keep = lam > rank_tol**2 * top  # eigenvalues are squared singular values
    coef = V[:, keep].T @ d
    resid = np.linalg.norm(d - V[:, keep] @ coef)
    if resid > _RANGE_TOL * max(np.linalg.norm(d), 1.0):
        return INFINITE_RATE
    return 0.5 * float(np.sum(coef**2 / lam[keep]))


def rate_gap_table(v: SpectralField, u0: SpectralField, noise: NoiseModel, T: float,
                   Ns: Sequence[int]) -> list:
    """Rows ``(tau, rate_exact, rate_temporal, gap)``."""
    exact = rate_exact(v, u0, noise, T)
    rows = []
    for N in Ns:
        disc = rate_temporal(v, u0, noise, T, N)
        rows.append((T / N, exact, disc, abs(exact - disc)))
    return rows


def write_rate_table(rows, path: str, scale_name: str = "tau") -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([scale_name, "rate_exact", "rate_discrete", "gap"])
        for r in rows:
            wr.writerow([repr(float(x)) for x in r])
