"""Closed-form oracle for the homogeneous cavity ``(0, pi)^3`` with ``eps = mu = 1``.

Each TM mode pair ``(u1, u2)`` spans a 2x2 block on which the Maxwell
operator acts as ``omega * J`` with ``J = [[0, 1], [-1, 0]]`` in coordinates
``u = a u1 + b u2``, i.e. ``M u1 = -omega u2`` and ``M u2 = omega u1``.
Identifying ``(a, b)`` with ``z = a + i b`` turns the flow into
``z -> exp(-i omega t) z``, the midpoint map into multiplication by
``(1 - ic) / (1 + ic)`` and the noise factor into ``1 / (1 + ic)``, where
``c = tau omega / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .dg_space import AnalyticField
from .mesh import Cuboid
from .noise import NoiseModel, NoisePath, refine_path

__all__ = [
    "CavityMode",
    "SpectralField",
    "tm_mode",
    "rotation",
    "midpoint_blocks",
    "midpoint_spectral_step",
    "run_midpoint_spectral",
    "exact_flow",
    "exact_flow_trajectory",
    "semigroup_error",
    "expected_ms_error",
    "reference_bias",
    "spectral_coordinates",
    "to_analytic",
]

_NORM = 2.0 / np.pi**1.5  # makes each member of a block unit norm on (0, pi)^3


@dataclass(frozen=True, eq=False)
class CavityMode:
    """TM pair with ``E = (0, 0, sin(m x1) sin(n x2))`` up to normalization."""

    m: int
    n: int
    omega: float
    u1: AnalyticField
    u2: AnalyticField
    domain: Cuboid = Cuboid.pi_cube()


def _zeros(x):
    return np.zeros(len(x))


def tm_mode(indices: Tuple[int, int], domain: Optional[Cuboid] = None, eps: float = 1.0,
            mu: float = 1.0) -> CavityMode:
    """Normalized TM cavity pair for indices ``(m, n)`` on ``(0, pi)^3``."""
    m, n = (int(v) for v in indices)
    if m < 1 or n < 1:
        raise ValueError("mode indices must be >= 1")
    if eps != 1.0 or mu != 1.0:
        raise ValueError("cavity modes are provided for eps = mu = 1 only")
    if domain is not None and not (np.allclose(domain.lower, 0.0) and np.allclose(domain.upper, np.pi)):
        raise ValueError("cavity modes are provided for the cube (0, pi)^3 only")
    w = float(np.hypot(m, n))
    c = _NORM

    def u1(x):
        z = _zeros(x)
        return np.stack([z, z, c * np.sin(m * x[:, 0]) * np.sin(n * x[:, 1]), z, z, z], axis=1)

    def u2(x):
        z = _zeros(x)
        return np.stack([z, z, z,
                         c * n * np.sin(m * x[:, 0]) * np.cos(n * x[:, 1]) / w,
                         -c * m * np.cos(m * x[:, 0]) * np.sin(n * x[:, 1]) / w, z], axis=1)

    # M u1 = -w u2 and M u2 = w u1, so curls follow from the block relations:
    # (curl E, curl H) of u1 is (0, w * H-part of u2); of u2 is (w * E-part of u1, 0)
    def curl1(x):
        out = np.zeros((len(x), 6))
        out[:, :3] = w * u2(x)[:, 3:]
        return out

    def curl2(x):
        out = np.zeros((len(x), 6))
        out[:, 3:] = w * u1(x)[:, :3]
        return out

    def div(x):
        return np.zeros((len(x), 2))

    def jac1(x):
        out = np.zeros((len(x), 6, 3))
        out[:, 2, 0] = c * m * np.cos(m * x[:, 0]) * np.sin(n * x[:, 1])
        out[:, 2, 1] = c * n * np.sin(m * x[:, 0]) * np.cos(n * x[:, 1])
        return out

    def jac2(x):
        out = np.zeros((len(x), 6, 3))
        s0, c0 = np.sin(m * x[:, 0]), np.cos(m * x[:, 0])
        s1, c1 = np.sin(n * x[:, 1]), np.cos(n * x[:, 1])
        out[:, 3, 0] = c * n * m * c0 * c1 / w
        out[:, 3, 1] = -c * n * n * s0 * s1 / w
        out[:, 4, 0] = c * m * m * s0 * s1 / w
        out[:, 4, 1] = -c * m * n * c0 * c1 / w
        return out

    def hess1(x):
        out = np.zeros((len(x), 6, 3, 3))
        s0, c0 = np.sin(m * x[:, 0]), np.cos(m * x[:, 0])
        s1, c1 = np.sin(n * x[:, 1]), np.cos(n * x[:, 1])
        out[:, 2, 0, 0] = -c * m * m * s0 * s1
        out[:, 2, 1, 1] = -c * n * n * s0 * s1
        out[:, 2, 0, 1] = out[:, 2, 1, 0] = c * m * n * c0 * c1
        return out

    def hess2(x):
        out = np.zeros((len(x), 6, 3, 3))
        s0, c0 = np.sin(m * x[:, 0]), np.cos(m * x[:, 0])
        s1, c1 = np.sin(n * x[:, 1]), np.cos(n * x[:, 1])
        a = c / w
        out[:, 3, 0, 0] = -a * n * m * m * s0 * c1
        out[:, 3, 1, 1] = -a * n * n * n * s0 * c1
        out[:, 3, 0, 1] = out[:, 3, 1, 0] = -a * n * n * m * c0 * s1
        out[:, 4, 0, 0] = a * m * m * m * c0 * s1
        out[:, 4, 1, 1] = a * m * n * n * c0 * s1
        out[:, 4, 0, 1] = out[:, 4, 1, 0] = a * m * m * n * s0 * c1
        return out

    return CavityMode(m, n, w,
                      AnalyticField(u1, curl1, div, jac1, hess1),
                      AnalyticField(u2, curl2, div, jac2, hess2))


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Coordinates ``coeffs[..., b, :] = (a_b, b_b)`` over the blocks of ``modes``.

    Leading axes (e.g. Monte Carlo paths) are allowed.
    """

    omegas: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omegas, dtype=float).reshape(-1)
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape[-2:] != (len(om), 2):
            raise ValueError("coefficients must end in (n_blocks, 2)")
        if not np.all(np.isfinite(c)):
            raise ValueError("spectral coefficients must be finite")
        object.__setattr__(self, "omegas", om)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, omegas, batch: Tuple[int, ...] = ()) -> "SpectralField":
        om = np.asarray(omegas, dtype=float).reshape(-1)
        return cls(om, np.zeros(tuple(batch) + (len(om), 2)))

    def norm_sq(self) -> np.ndarray:
        return np.sum(self.coeffs**2, axis=(-2, -1))

    def norm(self) -> np.ndarray:
        return np.sqrt(self.norm_sq())

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.omegas, self.coeffs - other.coeffs)


def _as_complex(c: np.ndarray) -> np.ndarray:
    return c[..., 0] + 1j * c[..., 1]


def _as_real(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


def rotation(omega, t) -> np.ndarray:
    """Exact block propagator ``exp(omega t J)``, shape ``(..., 2, 2)``."""
    th = np.asarray(omega, dtype=float) * t
    c, s = np.cos(th), np.sin(th)
    return np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)


def midpoint_blocks(omega, tau) -> Tuple[np.ndarray, np.ndarray]:
    """``(S_tau, T_tau)`` blocks: ``((1-c^2) I + 2cJ)/(1+c^2)`` and ``(I + cJ)/(1+c^2)``."""
    c = 0.5 * np.asarray(tau, dtype=float) * np.asarray(omega, dtype=float)
    d = 1.0 + c * c
    one = np.ones_like(c)
    S = np.stack([np.stack([(1 - c * c) / d, 2 * c / d], -1), np.stack([-2 * c / d, (1 - c * c) / d], -1)], -2)
    T = np.stack([np.stack([one / d, c / d], -1), np.stack([-c / d, one / d], -1)], -2)
    return S, T


def midpoint_spectral_step(u: SpectralField, tau: float, increments: np.ndarray) -> SpectralField:
    """One midpoint step ``u <- S_tau u - T_tau dW`` with ``increments`` shaped like ``u.coeffs``."""
    if not tau > 0:
        raise ValueError("time step must be positive")
    S, T = midpoint_blocks(u.omegas, tau)
    new = np.einsum("bij,...bj->...bi", S, u.coeffs) - np.einsum("bij,...bj->...bi", T, increments)
    return SpectralField(u.omegas, new)


def _block_increments(noise: NoiseModel, path_incs: np.ndarray, n_blocks: Optional[int] = None) -> np.ndarray:
    """Scatter per-mode increments ``(..., N, m)`` to ``(..., N, n_blocks, 2)``.

    Blocks beyond the noise modes (e.g. carrying only initial data) get zeros.
    """
    if noise.blocks is None:
        raise ValueError("noise modes are not aligned with cavity blocks")
    nb = len(noise.cavity_modes) if n_blocks is None else int(n_blocks)
    if nb < len(noise.cavity_modes):
        raise ValueError("fewer spectral blocks than noise blocks")
    out = np.zeros(path_incs.shape[:-1] + (nb, 2))
    out[..., noise.blocks[:, 0], noise.blocks[:, 1]] = path_incs
    return out


def spectral_coordinates(noise: NoiseModel) -> np.ndarray:
    return np.array([mode.omega for mode in noise.cavity_modes])


def run_midpoint_spectral(u0: SpectralField, noise: NoiseModel, increments: np.ndarray, tau: float) -> np.ndarray:
    """Midpoint trajectory in block coordinates.

    ``increments`` has shape ``(..., N, m)`` (mode increments, possibly for
    many paths). Returns ``(..., N + 1, n_blocks, 2)``.
    """
    dW = _block_increments(noise, increments, len(u0.omegas))
    S, T = midpoint_blocks(u0.omegas, tau)
    N = dW.shape[-3]
    out = np.empty(dW.shape[:-3] + (N + 1,) + dW.shape[-2:])
    out[..., 0, :, :] = np.broadcast_to(u0.coeffs, out[..., 0, :, :].shape)
    for n in range(N):
        out[..., n + 1, :, :] = (np.einsum("bij,...bj->...bi", S, out[..., n, :, :])
                                 - np.einsum("bij,...bj->...bi", T, dW[..., n, :, :]))
    return out


def exact_flow_trajectory(u0: SpectralField, noise: NoiseModel, increments: np.ndarray, dt: float,
                          stride: int = 1) -> np.ndarray:
    """Mild solution with exact rotations and left-endpoint increment placement.

    Uses ``x_l = S(dt)(x_{l-1} - dW_l)`` on the grid of the increments (step
    ``dt``); returns every ``stride``-th state, shape ``(..., N/stride + 1, n_blocks, 2)``.
    """
    dW = _as_complex(_block_increments(noise, increments, len(u0.omegas)))
    rot = np.exp(-1j * u0.omegas * dt)
    N = dW.shape[-2]
    if N % stride:
        raise ValueError("stride must divide the number of steps")
    x = np.broadcast_to(_as_complex(u0.coeffs), dW.shape[:-2] + dW.shape[-1:]).copy()
    out = np.empty(dW.shape[:-2] + (N // stride + 1,) + dW.shape[-1:], dtype=complex)
    out[..., 0, :] = x
    for l in range(N):
        x = rot * (x - dW[..., l, :])
        if (l + 1) % stride == 0:
            out[..., (l + 1) // stride, :] = x
    return _as_real(out)


def exact_flow(u0: SpectralField, noise: NoiseModel, path: Optional[NoisePath], T: float,
               refinement: int = 1) -> SpectralField:
    """Mild solution at ``T`` on ``path`` refined by ``refinement`` (``path=None``: no noise)."""
    if path is None:
        z = _as_complex(u0.coeffs) * np.exp(-1j * u0.omegas * T)
        return SpectralField(u0.omegas, _as_real(z))
    if len(path.variances) != noise.n_modes:
        raise ValueError("path and noise model have different mode counts")
    if not np.isclose(path.times[-1], T, rtol=1e-12, atol=0.0):
        raise ValueError("path does not end at T")
    fine = refine_path(path, refinement) if refinement > 1 else path
    dt = np.diff(fine.times)
    if np.ptp(dt) > 1e-12 * dt.max():
        raise ValueError("exact flow expects a uniform grid")
    traj = exact_flow_trajectory(u0, noise, fine.increments, T / fine.n_steps, stride=fine.n_steps)
    return SpectralField(u0.omegas, traj[..., -1, :, :])


def semigroup_error(v: SpectralField, tau: float, n: int) -> float:
    """``||(S(t_n) - S_tau^n) v||_V`` from the rotation-angle gap per block."""
    gap = v.omegas * n * tau - n * 2.0 * np.arctan(0.5 * tau * v.omegas)
    per_block = 2.0 * np.abs(np.sin(0.5 * gap))
    return float(np.sqrt(np.sum(per_block**2 * np.sum(v.coeffs**2, axis=-1))))


def expected_ms_error(omegas, block_q, u0_coeffs, T: float, N: int) -> np.ndarray:
    """Closed-form ``E||u(t_n) - u^n||_V^2`` for ``n = 0..N`` (exact Ito convolution).

    ``block_q`` has shape ``(n_blocks, 2)``: variances of the two block members.
    """
    om = np.asarray(omegas, dtype=float)
    q = np.asarray(block_q, dtype=float).sum(axis=-1)  # each member contributes |.|^2 * q
    z0 = _as_complex(np.asarray(u0_coeffs, dtype=float))
    tau = T / N
    c = 0.5 * tau * om
    sig = (1 - 1j * c) / (1 + 1j * c)
    theta = 1.0 / (1 + 1j * c)
    # int_0^tau exp(-i om r) dr
    with np.errstate(invalid="ignore", divide="ignore"):
        kern = np.where(om * tau > 1e-8, (1 - np.exp(-1j * om * tau)) / (1j * om), tau)
    out = np.zeros(N + 1)
    for n in range(1, N + 1):
        k = np.arange(1, n + 1)[:, None]
        w = sig[None, :] ** (n - k) * theta[None, :]
        cross = np.exp(-1j * om[None, :] * (n - k) * tau) * kern[None, :]
        per = tau * (1 + np.abs(w) ** 2) - 2 * np.real(cross * np.conj(w))
        det = np.abs(np.exp(-1j * om * n * tau) - sig**n) ** 2 * np.abs(z0) ** 2
        out[n] = float(np.sum(q * per.sum(axis=0)) + np.sum(det))
    return out


def reference_bias(omegas, block_q, T: float, fine_dt: float) -> float:
    """RMS gap between the left-endpoint reference convolution and the exact one at ``T``."""
    om = np.asarray(omegas, dtype=float)
    q = np.asarray(block_q, dtype=float).sum(axis=-1)
    per_step = 2.0 * (fine_dt - np.sin(om * fine_dt) / om)
    return float(np.sqrt(np.sum(q * (T / fine_dt) * per_step)))


def to_analytic(field: SpectralField, modes: Sequence[CavityMode]) -> AnalyticField:
    """Analytic field ``sum_b a_b u1_b + b_b u2_b`` (single field, no batch axes)."""
    c = np.asarray(field.coeffs)
    if c.ndim != 2:
        raise ValueError("to_analytic needs a single spectral field")
    parts, weights = [], []
    for mode, (a, b) in zip(modes, c):
        parts.extend([mode.u1, mode.u2])
        weights.extend([a, b])
    return AnalyticField.combine(parts, weights)
