"""Finite-rank Q-Wiener noise: spectral model, reproducible path sampling, refinement.

A noise model is ``W(t) = sum_j sqrt(q_j) beta_j(t) g_j`` with ``g_j``
orthonormal in the weighted inner product. Paths are stored as cumulative
mode coordinates ``W_j(t_n) = <W(t_n), g_j>_V`` on a time grid, so that
aggregation to a coarser grid is a plain subsampling and therefore exact.

Random numbers come from a counter-based Philox generator keyed by
``(seed, path_index, refinement level)`` and are turned into normals by the
inverse normal CDF, so every path is reproducible on its own, independently
of how many paths are drawn or in which order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

from .dg_space import AnalyticField, project
from .mesh import Mesh

__all__ = [
    "NoiseModel",
    "NoisePath",
    "sample_path",
    "sample_paths",
    "refine_path",
    "aggregate",
    "commuting_noise_from_modes",
    "critical_mixture",
    "projected_modes",
    "uniform_grid",
    "standard_normals",
]

_TWO53 = float(2**53)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Finite list of covariance eigenpairs ``(g_j, q_j)``.

    ``blocks`` is set for noise built from cavity modes: entry ``j`` is
    ``(block index, member)`` locating ``g_j`` in the 2x2 invariant blocks of
    the operator listed in ``cavity_modes``.
    """

    fields: Tuple[AnalyticField, ...]
    variances: np.ndarray
    commuting_with_M: bool = False
    cavity_modes: Tuple = ()
    blocks: Optional[np.ndarray] = None
    label: str = ""

    def __post_init__(self):
        q = np.asarray(self.variances, dtype=float).reshape(-1)
        if len(q) != len(self.fields):
            raise ValueError("one variance per noise mode required")
        if np.any(~(q > 0)):
            raise ValueError("noise variances must be positive")
        q.setflags(write=False)
        object.__setattr__(self, "variances", q)
        object.__setattr__(self, "fields", tuple(self.fields))

    @property
    def n_modes(self) -> int:
        return len(self.fields)

    @property
    def trace(self) -> float:
        """``Tr(Q) = sum_j q_j``."""
        return float(np.sum(self.variances))

    def block_variances(self) -> np.ndarray:
        """Per cavity block ``(n_blocks, 2)`` variances (commuting noise only)."""
        if self.blocks is None:
            raise ValueError("noise is not aligned with cavity blocks")
        out = np.zeros((len(self.cavity_modes), 2))
        out[self.blocks[:, 0], self.blocks[:, 1]] = self.variances
        return out

    def scaled(self, factor: float) -> "NoiseModel":
        """Noise ``sqrt(factor) W`` (variances times ``factor``)."""
        return NoiseModel(self.fields, self.variances * factor, self.commuting_with_M,
                          self.cavity_modes, self.blocks, self.label)


@dataclass(frozen=True, eq=False)
class NoisePath:
    """A sampled path on ``times``; ``values[n, j] = <W(t_n), g_j>_V``."""

    times: np.ndarray
    values: np.ndarray
    variances: np.ndarray
    seed: int
    path_index: int
    history: Tuple[int, ...] = field(default=())

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def increments(self) -> np.ndarray:
        """``(N, m)`` increments ``Delta W_j^n`` with variance ``(t_n - t_{n-1}) q_j``."""
        return np.diff(self.values, axis=0)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)


def uniform_grid(T: float, N: int) -> np.ndarray:
    if N < 1:
        raise ValueError("time grid needs at least one step")
    if not T > 0:
        raise ValueError("final time must be positive")
    return np.linspace(0.0, float(T), int(N) + 1)


def standard_normals(seed: int, key: Tuple[int, ...], shape) -> np.ndarray:
    """Standard normals from the Philox stream keyed by ``(seed, *key)`` (inverse-CDF transform)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    gen = np.random.Generator(np.random.Philox(ss))
    size = int(np.prod(shape))
    uni = (gen.integers(0, 2**53, size=size, dtype=np.int64).astype(float) + 0.5) / _TWO53
    return ndtri(uni).reshape(shape)


def _check_grid(grid) -> np.ndarray:
    t = np.asarray(grid, dtype=float).reshape(-1)
    if len(t) < 2:
        raise ValueError("time grid must contain at least two points")
    if np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return t


def sample_path(noise: NoiseModel, grid, seed: int, path_index: int = 0) -> NoisePath:
    """Sample ``W`` at the grid points, with ``W(t_0) = 0``."""
    t = _check_grid(grid)
    z = standard_normals(seed, (path_index, 0), (len(t) - 1, noise.n_modes))
    inc = np.sqrt(np.diff(t)[:, None] * noise.variances[None, :]) * z
    values = np.vstack([np.zeros((1, noise.n_modes)), np.cumsum(inc, axis=0)])
    return NoisePath(t, values, noise.variances, int(seed), int(path_index))


def sample_paths(noise: NoiseModel, grid, seed: int, n_paths: int, start: int = 0):
    return [sample_path(noise, grid, seed, start + i) for i in range(n_paths)]


def _bisect(path: NoisePath) -> NoisePath:
    level = len(path.history) + 1
    dt = path.steps
    z = standard_normals(path.seed, (path.path_index, level, 2), (path.n_steps, path.values.shape[1]))
    mid = 0.5 * (path.values[:-1] + path.values[1:]) + np.sqrt(0.25 * dt[:, None] * path.variances[None, :]) * z
    values = np.empty((2 * path.n_steps + 1, path.values.shape[1]))
    values[0::2] = path.values
    values[1::2] = mid
    times = np.empty(2 * path.n_steps + 1)
    times[0::2] = path.times
    times[1::2] = 0.5 * (path.times[:-1] + path.times[1:])
    return NoisePath(times, values, path.variances, path.seed, path.path_index, path.history + (2,))


def _bridge_split(path: NoisePath, factor: int) -> NoisePath:
    level = len(path.history) + 1
    m = path.values.shape[1]
    z = standard_normals(path.seed, (path.path_index, level, factor), (factor - 1, path.n_steps, m))
    dt = path.steps / factor
    values = np.empty((factor * path.n_steps + 1, m))
    values[0::factor] = path.values
    prev = path.values[:-1]
    right = path.values[1:]
    for k in range(1, factor):
        remaining = (factor - k + 1) * dt  # time from previous point to the right end
        mean = prev + (dt / remaining)[:, None] * (right - prev)
        var = (dt * (remaining - dt) / remaining)[:, None] * path.variances[None, :]
        prev = mean + np.sqrt(var) * z[k - 1]
        values[k::factor] = prev
    frac = np.arange(factor) / factor
    times = np.concatenate([(path.times[:-1, None] + frac[None, :] * np.diff(path.times)[:, None]).ravel(),
                            path.times[-1:]])
    return NoisePath(times, values, path.variances, path.seed, path.path_index, path.history + (factor,))


def refine_path(path: NoisePath, factor: int) -> NoisePath:
    """Subdivide every step into ``factor`` equal substeps by Brownian-bridge interpolation.

    Values at the coarse grid points are kept verbatim, so aggregating the
    result by ``factor`` returns the original increments bitwise. Powers of
    two are realized as repeated bisection, which makes successive
    refinements by 2 identical to one refinement by 4.
    """
    factor = int(factor)
    if factor < 2:
        raise ValueError("refinement factor must be >= 2")
    if path.n_steps * factor > 2**31:
        raise OverflowError("refined grid too large")
    if factor & (factor - 1) == 0:
        out = path
        while factor > 1:
            out = _bisect(out)
            factor //= 2
        return out
    return _bridge_split(path, factor)


def aggregate(path: NoisePath, factor: int) -> NoisePath:
    """Coarsen by keeping every ``factor``-th grid point (sums of consecutive increments)."""
    factor = int(factor)
    if factor < 1 or path.n_steps % factor:
        raise ValueError(f"cannot aggregate {path.n_steps} steps by {factor}")
    hist = path.history
    # undo the matching refinement record when possible
    f, k = factor, len(hist)
    while f > 1 and k > 0 and f % hist[k - 1] == 0:
        f //= hist[k - 1]
        k -= 1
    return NoisePath(path.times[::factor], path.values[::factor], path.variances, path.seed,
                     path.path_index, hist[:k] if f == 1 else hist)


def commuting_noise_from_modes(modes: Sequence, variances, medium_constant: bool = True) -> NoiseModel:
    """Noise diagonal in the cavity eigenstructure; each ``q`` goes to both block members."""
    if not medium_constant:
        raise ValueError("commuting noise requires a constant medium")
    modes = tuple(modes)
    q = np.broadcast_to(np.asarray(variances, dtype=float), (len(modes),))
    fields, qs, blocks = [], [], []
    for b, (mode, qb) in enumerate(zip(modes, q)):
        fields.extend([mode.u1, mode.u2])
        qs.extend([qb, qb])
        blocks.extend([(b, 0), (b, 1)])
    blocks = np.asarray(blocks, dtype=np.int64)
    blocks.setflags(write=False)
    return NoiseModel(tuple(fields), np.asarray(qs), True, modes, blocks, label="cavity")


def critical_mixture(k: int, n_modes: int, trace: float = 1.0, excess: float = 0.1) -> NoiseModel:
    """Diagonal modes ``(j, j)``, ``omega_j = sqrt(2) j``, ``q_j ~ j^-(2k + 1 + excess)``.

    The weights make ``Q^{1/2}`` Hilbert-Schmidt into ``D(M^k)`` only barely,
    which exposes the regularity-limited convergence rate. Scaled to the
    requested trace.
    """
    from .spectral import tm_mode

    if k not in (1, 2):
        raise ValueError("regularity class k must be 1 or 2")
    j = np.arange(1, n_modes + 1)
    w = j ** (-(2.0 * k + 1.0 + excess))
    q = w * trace / (2.0 * w.sum())
    noise = commuting_noise_from_modes([tm_mode((int(i), int(i))) for i in j], q)
    return NoiseModel(noise.fields, noise.variances, True, noise.cavity_modes, noise.blocks,
                      label=f"critical-k{k}-J{n_modes}")


def projected_modes(noise: NoiseModel, mesh: Mesh, degree: int = 8) -> np.ndarray:
    """Matrix ``P`` of shape ``(N_h, m)`` whose columns are ``pi_h g_j``."""
    return np.stack([project(g, mesh, degree).vector for g in noise.fields], axis=1)
