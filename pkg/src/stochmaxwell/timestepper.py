"""Implicit midpoint time stepping of the dG semidiscretization.

In coefficient form one step solves

    (A - tau/2 B) u^{n+1} = (A + tau/2 B) u^n - A P dW^{n+1},

where ``P`` holds the projected noise modes and ``dW`` the per-mode
increments. Paths can be advanced together as columns of a matrix.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .dg_space import AnalyticField, DgField, project
from .maxwell_operator import DiscreteMaxwellOperator, assemble
from .mesh import Mesh
from .noise import NoiseModel, NoisePath, projected_modes, sample_path, uniform_grid

__all__ = [
    "MidpointSolver",
    "SchemeState",
    "Trajectory",
    "initial_state",
    "step",
    "mild_step",
    "run_path",
    "run_batch",
    "propagate_modes",
    "propagate_deterministic",
    "expm_reference",
    "expm_action",
    "SolverError",
    "DIRECT_SIZE_LIMIT",
    "DENSE_SIZE_LIMIT",
]

DIRECT_SIZE_LIMIT = 30_000  # N_h above which GMRES replaces the sparse LU
DENSE_SIZE_LIMIT = 4_000


class SolverError(RuntimeError):
    pass


class MidpointSolver:
    """Solves with ``A - tau/2 B`` (shared read-only across paths).

    ``method`` is ``"direct"`` (sparse LU, factorized once), ``"gmres"``
    (preconditioned by the exact block-diagonal mass inverse) or ``"auto"``.
    """

    def __init__(self, op: DiscreteMaxwellOperator, tau: float, method: str = "auto",
                 rtol: float = 1e-13):
        if not tau > 0:
            raise ValueError("time step must be positive")
        self.op = op
        self.tau = float(tau)
        self.rtol = rtol
        if method == "auto":
            method = "direct" if op.n_dofs <= DIRECT_SIZE_LIMIT else "gmres"
        if method not in ("direct", "gmres"):
            raise ValueError(f"unknown solver method {method!r}")
        self.method = method
        half = 0.5 * self.tau
        self.lhs = (op.A - half * op.B).tocsc()
        self.rhs_matrix = (op.A + half * op.B).tocsr()
        self._lock = threading.Lock()
        self._lu = None
        if method == "direct":
            self._lu = spla.splu(self.lhs)
            diag = self._lu.U.diagonal()
            if np.any(diag == 0) or not np.all(np.isfinite(diag)):
                raise SolverError("singular midpoint system: the assembled operator is not dissipative")
        else:
            self._lhs_csr = self.lhs.tocsr()
            self._precond = spla.LinearOperator(self.lhs.shape, matvec=op.mass.solve, dtype=float)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.method == "direct":
            with self._lock:
                return self._lu.solve(rhs)
        if rhs.ndim == 1:
            return self._gmres(rhs)
        return np.stack([self._gmres(rhs[:, j]) for j in range(rhs.shape[1])], axis=1)

    def _gmres(self, b: np.ndarray) -> np.ndarray:
        nb = np.linalg.norm(b)
        if nb == 0:
            return np.zeros_like(b)
        x, info = spla.gmres(self._lhs_csr, b, M=self._precond, rtol=self.rtol, atol=0.0,
                             restart=80, maxiter=50)
        res = np.linalg.norm(self._lhs_csr @ x - b) / nb
        if info != 0 and res > 1e-11:
            raise SolverError(f"GMRES did not converge (relative residual {res:.2e})")
        return x

    def apply_S(self, v: np.ndarray) -> np.ndarray:
        """``S_{h,tau} v = (I - tau/2 M_h)^{-1}(I + tau/2 M_h) v``."""
        return self.solve(self.rhs_matrix @ v)

    def apply_T(self, v: np.ndarray) -> np.ndarray:
        """``T_{h,tau} v = (I - tau/2 M_h)^{-1} v``."""
        return self.solve(self.op.A @ v)

    def residual(self, new: np.ndarray, old: np.ndarray, noise_vec: np.ndarray) -> float:
        """Relative residual of the implicit step equation."""
        rhs = self.rhs_matrix @ old - self.op.A @ noise_vec
        r = self.lhs @ new - rhs
        return float(np.linalg.norm(r) / max(np.linalg.norm(rhs), np.finfo(float).tiny))


@dataclass(frozen=True, eq=False)
class SchemeState:
    """Step index, coefficient vector(s) and the solver for the current (mesh, tau)."""

    n: int
    u: np.ndarray
    times: np.ndarray
    solver: MidpointSolver

    @property
    def t(self) -> float:
        return float(self.times[self.n])

    def field(self) -> DgField:
        return DgField(self.solver.op.mesh, self.u)


@dataclass(frozen=True, eq=False)
class Trajectory:
    mesh: Mesh
    times: np.ndarray
    states: np.ndarray  # (N + 1, N_h)

    def field(self, n: int) -> DgField:
        return DgField(self.mesh, self.states[n])


def initial_state(solver: MidpointSolver, u0, times) -> SchemeState:
    times = np.asarray(times, dtype=float)
    steps = np.diff(times)
    if not np.allclose(steps, solver.tau, rtol=1e-10, atol=0.0):
        raise ValueError("time grid step does not match the factorized tau")
    mesh = solver.op.mesh
    if isinstance(u0, AnalyticField):
        vec = project(u0, mesh).vector
    elif isinstance(u0, DgField):
        vec = u0.vector
    else:
        vec = np.asarray(u0, dtype=float)
    return SchemeState(0, vec.copy(), times, solver)


def step(state: SchemeState, noise_vec: np.ndarray) -> SchemeState:
    """Advance by one step; ``noise_vec`` holds coefficients of ``pi_h dW`` (vector or columns)."""
    if state.n >= len(state.times) - 1:
        raise IndexError("already at the final time")
    s = state.solver
    rhs = s.rhs_matrix @ state.u - s.op.A @ noise_vec
    return replace(state, n=state.n + 1, u=s.solve(rhs))


def mild_step(state: SchemeState, noise_vec: np.ndarray) -> np.ndarray:
    """The same step through the mild form ``S u - T pi_h dW`` (two separate solves)."""
    return state.solver.apply_S(state.u) - state.solver.apply_T(noise_vec)


def run_path(mesh_or_op: Union[Mesh, DiscreteMaxwellOperator], noise: Optional[NoiseModel], u0, T: float,
             N: int, seed: int = 0, path_index: int = 0, path: Optional[NoisePath] = None,
             P: Optional[np.ndarray] = None, solver: Optional[MidpointSolver] = None) -> Trajectory:
    """Full trajectory for one noise path (``noise=None``: deterministic)."""
    op = mesh_or_op if isinstance(mesh_or_op, DiscreteMaxwellOperator) else assemble(mesh_or_op)
    times = uniform_grid(T, N)
    if solver is None:
        solver = MidpointSolver(op, T / N)
    state = initial_state(solver, u0, times)
    states = np.empty((N + 1, op.n_dofs))
    states[0] = state.u
    if noise is not None:
        if P is None:
            P = projected_modes(noise, op.mesh)
        if path is None:
            path = sample_path(noise, times, seed, path_index)
        if path.n_steps != N:
            raise ValueError("noise path and time grid disagree")
        inc = path.increments
    for n in range(N):
        nv = P @ inc[n] if noise is not None else np.zeros(op.n_dofs)
        state = step(state, nv)
        states[n + 1] = state.u
    return Trajectory(op.mesh, times, states)


def run_batch(solver: MidpointSolver, u0: np.ndarray, P: np.ndarray, increments: np.ndarray,
              keep_all: bool = False) -> np.ndarray:
    """Advance many paths at once; ``increments`` is ``(paths, N, m)``.

    Returns ``(paths, N_h)`` final states, or ``(paths, N + 1, N_h)`` when ``keep_all``.
    """
    increments = np.asarray(increments, dtype=float)
    n_paths, N, _ = increments.shape
    U = np.repeat(np.asarray(u0, dtype=float)[:, None], n_paths, axis=1)
    out = np.empty((n_paths, N + 1, len(U))) if keep_all else None
    if keep_all:
        out[:, 0] = U.T
    A = solver.op.A
    for n in range(N):
        rhs = solver.rhs_matrix @ U - A @ (P @ increments[:, n, :].T)
        U = solver.solve(rhs)
        if keep_all:
            out[:, n + 1] = U.T
    return out if keep_all else U.T.copy()


def propagate_modes(solver: MidpointSolver, P: np.ndarray, N: int) -> np.ndarray:
    """``Y[l] = S_{h,tau}^l T_{h,tau} P`` for ``l = 0..N-1``, shape ``(N, N_h, m)``.

    By linearity the scheme state after ``n`` steps is
    ``S^n u0 - sum_{j=1..n} Y[n - j] dW_j``.
    """
    Y = np.empty((N,) + P.shape)
    Y[0] = solver.apply_T(P)
    for l in range(1, N):
        Y[l] = solver.apply_S(Y[l - 1])
    return Y


def propagate_deterministic(solver: MidpointSolver, u0: np.ndarray, N: int) -> np.ndarray:
    """``S_{h,tau}^n u0`` for ``n = 0..N``."""
    out = np.empty((N + 1, len(u0)))
    out[0] = u0
    for n in range(N):
        out[n + 1] = solver.apply_S(out[n])
    return out


def expm_action(op: DiscreteMaxwellOperator, v: np.ndarray, t: float) -> np.ndarray:
    """``exp(t M_h) v`` without forming the exponential (Krylov/Taylor action)."""
    if t == 0:
        return np.array(v, dtype=float, copy=True)
    # A^{-1} is block diagonal, so A^{-1} B has the sparsity pattern of B
    M_sparse = (op.mass.inverse_matrix() @ op.B).tocsr()
    return spla.expm_multiply(t * M_sparse, v)


def expm_reference(op: DiscreteMaxwellOperator, u0, T: float, path: Optional[NoisePath] = None,
                   P: Optional[np.ndarray] = None, noise: Optional[NoiseModel] = None) -> DgField:
    """Semidiscrete mild solution at ``T`` with a dense matrix exponential.

    The stochastic convolution uses left-endpoint placement of the path's
    increments: ``x_l = E (x_{l-1} - P dW_l)`` with ``E = exp(dt M_h)``.
    """
    if op.n_dofs > DENSE_SIZE_LIMIT:
        raise ValueError(f"dense exponential limited to N_h <= {DENSE_SIZE_LIMIT} (got {op.n_dofs})")
    mesh = op.mesh
    if isinstance(u0, AnalyticField):
        x = project(u0, mesh).vector
    elif isinstance(u0, DgField):
        x = u0.vector.copy()
    else:
        x = np.asarray(u0, dtype=float).copy()
    if T == 0:
        return DgField(mesh, x)
    Mh = op.to_dense()
    if path is None:
        return DgField(mesh, scipy.linalg.expm(T * Mh) @ x)
    if not np.isclose(path.times[-1], T, rtol=1e-12, atol=0.0):
        raise ValueError("path does not end at T")
    if P is None:
        if noise is None:
            raise ValueError("projected modes or the noise model are required")
        P = projected_modes(noise, mesh)
    dts = np.diff(path.times)
    if np.ptp(dts) > 1e-12 * dts.max():
        raise ValueError("expm_reference expects a uniform grid")
    E = scipy.linalg.expm(dts[0] * Mh)
    for inc in path.increments:
        x = E @ (x - P @ inc)
    return DgField(mesh, x)
