"""Experiment orchestration: convergence studies, energy, divergence, rate gaps.

Every stochastic study couples all resolutions through shared noise paths:
one path per index is sampled on the coarsest grid and refined by Brownian
bridges, so coarse increments are exact sums of fine ones. Paths are processed
in fixed-size chunks whose results are concatenated in path order; the worker
count only decides how many chunks run concurrently, so numbers are bitwise
independent of it.

For the dG studies the scheme is linear in the noise, so the state after ``n``
steps is ``S^n pi_h u0 - sum_j Y[n-j] dW_j`` with ``Y[l] = S^l T P``. The
propagated vectors are computed once per (mesh, tau) and each path is then a
small linear combination; errors against spectral references are evaluated
exactly through Gram matrices (``<u_h, g>_V = (pi_h g)^T A u_h`` for analytic
``g``). The same representation yields exact expected errors and energies,
reported next to the Monte Carlo estimates.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .dg_space import AnalyticField, DgField, error_norm_V, project
from .divergence import build_test_space, choose_test_functions, divergence_report
from .ldp import (brute_force_rate, full_rate_vectors, rate_exact, rate_full_details, rate_gap_table,
                  rate_temporal)
from .maxwell_operator import assemble
from .mesh import Cuboid, MediumSpec, build_structured_mesh
from .noise import (NoiseModel, commuting_noise_from_modes, critical_mixture, projected_modes,
                    refine_path, sample_path, uniform_grid)
from .spectral import (SpectralField, expected_ms_error, exact_flow_trajectory, midpoint_blocks,
                       reference_bias, rotation, run_midpoint_spectral, tm_mode, to_analytic)
from .timestepper import (MidpointSolver, expm_action, propagate_deterministic, propagate_modes,
                          run_batch)

__all__ = [
    "ExperimentError",
    "Check",
    "SlopeFit",
    "RunResult",
    "fit_slope",
    "converge_time",
    "converge_space",
    "converge_full",
    "energy",
    "divergence_check",
    "ldp_gap",
    "export_vtk",
    "EXPERIMENTS",
    "mc_map",
]


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    threshold: str
    passed: bool


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    residual: float


def fit_slope(points: Sequence[Tuple[float, float]]) -> SlopeFit:
    """Least-squares line through ``(log scale, log error)``; residual is the RMS log misfit."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
        raise ValueError("slope fitting needs at least three (scale, error) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError("scales and errors must be positive and finite")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    X = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    return SlopeFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res**2))))


@dataclass
class RunResult:
    kind: str
    tables: Dict[str, dict] = field(default_factory=dict)
    fits: Dict[str, dict] = field(default_factory=dict)
    diagnostics: Dict[str, object] = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)
    provenance: Dict[str, object] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add_table(self, name: str, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
        self.tables[name] = {"columns": list(columns), "rows": [list(r) for r in rows]}

    def add_fit(self, name: str, fit: SlopeFit, scale: str) -> None:
        self.fits[name] = {"slope": fit.slope, "intercept": fit.intercept, "residual": fit.residual,
                           "scale": scale}

    def check(self, name: str, value: float, passed: bool, threshold: str) -> None:
        self.checks.append(Check(name, float(value), threshold, bool(passed)))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "checks": [c.__dict__ for c in self.checks],
            "fits": self.fits,
            "diagnostics": self.diagnostics,
            "tables": self.tables,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2, allow_nan=True)

    def write(self, directory: str) -> List[str]:
        os.makedirs(directory, exist_ok=True)
        paths = [os.path.join(directory, "result.json")]
        with open(paths[0], "w") as fh:
            fh.write(self.to_json() + "\n")
        for name, tab in self.tables.items():
            p = os.path.join(directory, f"{name}.csv")
            with open(p, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(tab["columns"])
                for row in tab["rows"]:
                    wr.writerow([_csv_value(v) for v in row])
            paths.append(p)
        return paths


def _csv_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _provenance(cfg: RunConfig, kind: str) -> dict:
    return {
        "experiment": kind,
        "config_hash": cfg.config_hash(),
        "config": cfg.provenance_dict(),
        "seed": cfg.mc.seed,
        "code_version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


# ---------------------------------------------------------------------------
# Monte Carlo orchestration


def mc_map(fn: Callable[[int, int], object], n_paths: int, chunk: int, workers: int = 1) -> list:
    """Apply ``fn(start, stop)`` to fixed path chunks; results come back in path order."""
    bounds = [(s, min(n_paths, s + chunk)) for s in range(0, n_paths, chunk)]
    if workers <= 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def _rms_stats(e2: np.ndarray) -> Tuple[float, float, int]:
    """RMS error and its delta-method standard error from per-path squared errors."""
    n = len(e2)
    mean = float(np.mean(e2))
    rms = math.sqrt(max(mean, 0.0))
    if n < 2 or rms == 0:
        return rms, 0.0, n
    se = float(np.std(e2, ddof=1) / math.sqrt(n)) / (2.0 * rms)
    return rms, se, n


def _max_over_steps(e2: np.ndarray) -> Tuple[float, float, int, int]:
    """Pick the step with the largest mean squared error; ``e2`` is ``(paths, steps)``."""
    means = e2.mean(axis=0)
    n_star = int(np.argmax(means))
    rms, se, n = _rms_stats(e2[:, n_star])
    return rms, se, n, n_star


# ---------------------------------------------------------------------------
# problem construction


def build_domain(cfg: RunConfig) -> Cuboid:
    return Cuboid(tuple(cfg.domain.lower), tuple(cfg.domain.upper))


def build_medium(cfg: RunConfig) -> MediumSpec:
    m = cfg.medium
    breaks = (m.breaks_x, m.breaks_y, m.breaks_z)
    if not any(breaks):
        if len(m.eps) != 1 or len(m.mu) != 1:
            raise ConfigError("several medium values need block breaks")
        return MediumSpec(eps=m.eps[0], mu=m.mu[0])
    shape = tuple(len(b) + 1 for b in breaks)
    size = int(np.prod(shape))

    def arr(vals):
        if len(vals) == 1:
            return np.full(shape, vals[0])
        if len(vals) != size:
            raise ConfigError(f"medium needs 1 or {size} values for the given breaks")
        return np.asarray(vals, dtype=float).reshape(shape)

    return MediumSpec(eps=arr(m.eps), mu=arr(m.mu), breaks=breaks)


def _is_pi_cube(cfg: RunConfig) -> bool:
    return (np.allclose(cfg.domain.lower, 0.0, atol=1e-14)
            and np.allclose(cfg.domain.upper, math.pi, rtol=1e-14, atol=0.0))


def _require_cavity(cfg: RunConfig) -> None:
    if not _is_pi_cube(cfg):
        raise ConfigError("spectral oracle needs the domain (0, pi)^3")
    if not (cfg.medium.constant and cfg.medium.eps[0] == 1.0 and cfg.medium.mu[0] == 1.0):
        raise ConfigError("spectral oracle needs a constant medium eps = mu = 1")


def build_noise(cfg: RunConfig) -> Optional[NoiseModel]:
    nc = cfg.noise
    if nc.kind == "none":
        return None
    _require_cavity(cfg)
    if nc.kind == "critical":
        return critical_mixture(nc.k, nc.n_modes, nc.trace)
    q = nc.variances if len(nc.variances) == len(nc.modes) else nc.variances * len(nc.modes)
    return commuting_noise_from_modes([tm_mode(mn) for mn in nc.modes], q)


def _u0_mode(cfg: RunConfig) -> Optional[Tuple[int, int]]:
    u0 = cfg.scheme.u0
    if u0.startswith("mode:"):
        parts = u0.split(":")
        if len(parts) != 3:
            raise ConfigError(f"initial mode must read mode:m:n, got {u0!r}")
        return int(parts[1]), int(parts[2])
    return None


@dataclass
class SpectralSetup:
    modes: list
    omegas: np.ndarray
    block_q: np.ndarray  # (nb, 2)
    x0: np.ndarray  # (nb, 2)

    @property
    def u0(self) -> SpectralField:
        return SpectralField(self.omegas, self.x0)


def spectral_setup(cfg: RunConfig, noise: Optional[NoiseModel]) -> SpectralSetup:
    _require_cavity(cfg)
    modes = list(noise.cavity_modes) if noise is not None else []
    mn = _u0_mode(cfg)
    if cfg.scheme.u0 == "linear-x":
        raise ConfigError("initial data linear-x has no spectral representation")
    index = None
    if mn is not None:
        for i, mode in enumerate(modes):
            if (mode.m, mode.n) == mn:
                index = i
        if index is None:
            modes.append(tm_mode(mn))
            index = len(modes) - 1
    nb = len(modes)
    q = np.zeros((nb, 2))
    if noise is not None:
        q[: len(noise.cavity_modes)] = noise.block_variances()
    x0 = np.zeros((nb, 2))
    if index is not None:
        x0[index, 0] = cfg.scheme.u0_scale
    if nb == 0:
        raise ConfigError("nothing to evolve: zero initial data and no noise")
    return SpectralSetup(modes, np.array([m.omega for m in modes]), q, x0)


def initial_field(cfg: RunConfig) -> AnalyticField:
    u0 = cfg.scheme.u0
    s = cfg.scheme.u0_scale
    if u0 == "zero":
        return AnalyticField(lambda x: np.zeros((len(x), 6)))
    if u0 == "linear-x":
        return AnalyticField(lambda x: np.concatenate([s * x[:, :1], np.zeros((len(x), 5))], axis=1))
    return tm_mode(_u0_mode(cfg)).u1.scaled(s)


def _check_divides(Ns: Sequence[int]) -> None:
    for a, b in zip(Ns[:-1], Ns[1:]):
        if b % a:
            raise ConfigError(f"step counts must form a refinement chain ({a} does not divide {b})")


def _sample_chunk(noise: NoiseModel, T: float, N0: int, factor: int, seed: int, start: int, stop: int) -> np.ndarray:
    """Shared paths ``(paths, N0 * factor + 1, m)`` sampled on the coarse grid and refined."""
    grid = uniform_grid(T, N0)
    out = []
    for p in range(start, stop):
        path = sample_path(noise, grid, seed, p)
        if factor > 1:
            path = refine_path(path, factor)
        out.append(path.values)
    return np.stack(out)


# ---------------------------------------------------------------------------
# temporal convergence (spectral oracle)


def _class_bounds(cfg: RunConfig, noise: Optional[NoiseModel]) -> Tuple[float, float]:
    if noise is None:
        lo, hi = 1.85, 2.15
    elif cfg.noise.kind == "critical" and cfg.noise.k == 1:
        lo, hi = 0.4, 0.75
    else:
        lo, hi = 0.9, 1.3
    if cfg.scheme.slope_min is not None:
        lo = cfg.scheme.slope_min
    if cfg.scheme.slope_max is not None:
        hi = cfg.scheme.slope_max
    return lo, hi


def converge_time(cfg: RunConfig) -> RunResult:
    """Mean-square error of the spectral midpoint scheme against the exact flow on shared paths."""
    noise = build_noise(cfg)
    setup = spectral_setup(cfg, noise)
    Ns = sorted(set(cfg.scheme.steps))
    if len(Ns) < 3:
        raise ConfigError("temporal convergence needs at least three step counts")
    _check_divides(Ns)
    T = cfg.scheme.T
    N0, Nmax = Ns[0], Ns[-1]
    R = cfg.scheme.reference_refinement
    factor = (Nmax // N0) * R
    Nfine = N0 * factor
    u0 = setup.u0
    result = RunResult("converge-time", provenance=_provenance(cfg, "converge-time"))

    if noise is None:
        n_paths = 1
        per_level = []
        for N in Ns:
            t = T * np.arange(N + 1) / N
            ref = np.einsum("nbij,bj->nbi", rotation(setup.omegas[None, :], t[:, None]), setup.x0)
            S, _ = midpoint_blocks(setup.omegas, T / N)
            x = setup.x0.copy()
            e2 = [float(np.sum((x - ref[0]) ** 2))]
            for n in range(N):
                x = np.einsum("bij,bj->bi", S, x)
                e2.append(float(np.sum((x - ref[n + 1]) ** 2)))
            per_level.append(np.array([e2]))
    else:
        n_paths = cfg.mc.paths

        def work(start, stop):
            values = _sample_chunk(noise, T, N0, factor, cfg.mc.seed, start, stop)
            inc = np.diff(values, axis=1)
            ref = exact_flow_trajectory(u0, noise, inc, T / Nfine, stride=Nfine // Nmax)
            out = []
            for N in Ns:
                cinc = np.diff(values[:, :: Nfine // N], axis=1)
                traj = run_midpoint_spectral(u0, noise, cinc, T / N)
                out.append(np.sum((traj - ref[:, :: Nmax // N]) ** 2, axis=(-2, -1)))
            return out

        chunks = mc_map(work, n_paths, cfg.mc.chunk, cfg.mc.workers)
        per_level = [np.concatenate([c[i] for c in chunks]) for i in range(len(Ns))]

    rows, pts = [], []
    for N, e2 in zip(Ns, per_level):
        rms, se, n, n_star = _max_over_steps(e2)
        expected = float(np.sqrt(np.max(expected_ms_error(setup.omegas, setup.block_q, setup.x0, T, N))))
        rows.append([T / N, N, rms, se, expected, n, n_star])
        pts.append((T / N, rms))
    result.add_table("errors", ["tau", "N", "rms_error", "std_error", "expected_rms", "n_paths", "worst_step"], rows)
    fit = fit_slope(pts)
    result.add_fit("rms_error_vs_tau", fit, "tau")
    fit_exp = fit_slope([(r[0], r[4]) for r in rows])
    result.add_fit("expected_rms_vs_tau", fit_exp, "tau")
    lo, hi = _class_bounds(cfg, noise)
    result.check("slope", fit.slope, lo <= fit.slope <= hi, f"[{lo}, {hi}]")
    bias = 0.0 if noise is None else reference_bias(setup.omegas, setup.block_q, T, T / Nfine)
    smallest = min(r[2] for r in rows)
    result.diagnostics.update({"reference_bias": bias, "reference_fine_steps": Nfine,
                               "bias_fraction_of_smallest_error": bias / smallest if smallest > 0 else 0.0,
                               "n_paths": n_paths})
    if noise is not None and bias >= 0.1 * smallest:
        raise ExperimentError(f"reference bias {bias:.3e} exceeds 10% of the smallest error {smallest:.3e}; "
                              "increase reference_refinement")
    result.check("reference_bias_fraction", bias / smallest if smallest > 0 else 0.0,
                 noise is None or bias < 0.1 * smallest, "< 0.1")
    return result


# ---------------------------------------------------------------------------
# dG linear response


class DgResponse:
    """Scheme states on one mesh and time grid as affine maps of the noise increments.

    ``basis`` holds ``D[0..N]`` (deterministic states) followed by
    ``Y[l][:, k]`` for ``l < N`` and each noise mode ``k``. ``gram`` is the
    V-Gram matrix of the basis and ``cross[i, :]`` the V-products with the
    projected spectral block functions (order ``u1_0, u2_0, u1_1, ...``).
    """

    def __init__(self, op, tau: float, N: int, u0_vec: np.ndarray, P: Optional[np.ndarray],
                 block_proj: np.ndarray, solver_method: str = "auto", keep_basis: bool = False):
        solver = MidpointSolver(op, tau, method=solver_method)
        self.N = N
        self.tau = tau
        self.m = 0 if P is None else P.shape[1]
        D = propagate_deterministic(solver, u0_vec, N)
        cols = [D.T]
        if P is not None:
            Y = propagate_modes(solver, P, N)  # (N, N_h, m)
            cols.append(Y.transpose(1, 0, 2).reshape(op.n_dofs, -1))
        basis = np.concatenate(cols, axis=1)
        AB = op.mass.apply(basis)
        self.gram = basis.T @ AB
        self.cross = block_proj.T @ AB  # (2 nb, nbasis)
        self.basis = basis if keep_basis else None

    def coefficients(self, n: int, inc: np.ndarray) -> np.ndarray:
        """Basis coefficients of the state after ``n`` steps; ``inc`` is ``(paths, N, m)``."""
        P = inc.shape[0]
        c = np.zeros((P, self.gram.shape[0]))
        c[:, n] = 1.0
        if self.m and n > 0:
            # coefficient of Y[l]_k is -inc[n - l - 1, k]
            block = -inc[:, n - 1::-1, :] if n > 0 else None
            c[:, self.N + 1: self.N + 1 + n * self.m] = block.reshape(P, -1)
        return c

    def sq_error(self, c: np.ndarray, x: np.ndarray) -> np.ndarray:
        """``||u_h - sum x_i g_i||_V^2`` for basis coefficients ``c`` and spectral coordinates ``x``."""
        xf = x.reshape(x.shape[0], -1)
        return (np.einsum("pi,ij,pj->p", c, self.gram, c) - 2.0 * np.einsum("pa,ai,pi->p", xf, self.cross, c)
                + np.sum(xf**2, axis=1))

    def sq_norm(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("pi,ij,pj->p", c, self.gram, c)

    def expected_sq_error_discrete(self, n: int, x_det: np.ndarray, ys: np.ndarray, q: np.ndarray) -> float:
        """Exact ``E||u_h^n - x^n||^2`` against a reference driven by the same increments.

        ``ys[l, k]`` (shape ``(N, m, 2 nb)``) are the reference responses to a
        unit increment of mode ``k`` after ``l`` further steps; ``q`` the mode variances.
        """
        c = np.zeros(self.gram.shape[0])
        c[n] = 1.0
        total = float(self.sq_error(c[None], x_det[None])[0])
        for l in range(n):
            for k in range(self.m):
                i = self.N + 1 + l * self.m + k
                y = ys[l, k]
                val = self.gram[i, i] - 2.0 * y @ self.cross[:, i] + y @ y
                total += self.tau * q[k] * val
        return total

    def expected_sq_norm(self, n: int, q: np.ndarray) -> float:
        total = float(self.gram[n, n])
        for l in range(n):
            for k in range(self.m):
                i = self.N + 1 + l * self.m + k
                total += self.tau * q[k] * self.gram[i, i]
        return total


def _block_projections(modes, mesh, degree: int) -> np.ndarray:
    cols = []
    for mode in modes:
        cols.append(project(mode.u1, mesh, degree).vector)
        cols.append(project(mode.u2, mesh, degree).vector)
    return np.stack(cols, axis=1)


def _noise_columns(noise: NoiseModel) -> np.ndarray:
    """Index into the block-projection columns for each noise mode."""
    return noise.blocks[:, 0] * 2 + noise.blocks[:, 1]


def _mesh_for(cfg: RunConfig, n: int):
    return build_structured_mesh(build_domain(cfg), n, build_medium(cfg))


def _check_doubling(levels: Sequence[int]) -> None:
    for a, b in zip(levels[:-1], levels[1:]):
        if b != 2 * a:
            raise ConfigError("mesh levels must form a doubling chain (n, 2n, 4n, ...)")


def converge_space(cfg: RunConfig) -> RunResult:
    """Spatial error of the dG scheme: deterministic semidiscrete, or shared-path full scheme at fixed tau."""
    levels = list(cfg.mesh.levels)
    if len(levels) < 3:
        raise ConfigError("spatial convergence needs at least three mesh levels")
    _check_doubling(levels)
    noise = build_noise(cfg)
    setup = spectral_setup(cfg, noise)
    T = cfg.scheme.T
    deg = cfg.scheme.quad_degree
    result = RunResult("converge-space", provenance=_provenance(cfg, "converge-space"))
    u0_an = to_analytic(setup.u0, setup.modes)
    rows, proj_pts = [], []

    if noise is None:
        exact_T = to_analytic(SpectralField(setup.omegas, np.einsum("bij,bj->bi", rotation(setup.omegas, T),
                                                                     setup.x0)), setup.modes)
        for n in levels:
            mesh = _mesh_for(cfg, n)
            op = assemble(mesh)
            uh = expm_action(op, project(u0_an, mesh, deg).vector, T)
            err = error_norm_V(exact_T, DgField(mesh, uh), mesh, deg)
            perr = error_norm_V(exact_T, project(exact_T, mesh, deg), mesh, deg)
            rows.append([mesh.h, n, err, 0.0, err, perr, 1])
            proj_pts.append((mesh.h, perr))
        lo = 1.4 if cfg.scheme.slope_min is None else cfg.scheme.slope_min
    else:
        N = cfg.scheme.steps[0]
        tau = T / N
        q = noise.variances
        S, Tb = midpoint_blocks(setup.omegas, tau)
        nb = len(setup.omegas)
        # spectral responses: x_det[n] and ys[l, k] = S^l T e_k in block coordinates
        x_det = np.empty((N + 1, nb, 2))
        x_det[0] = setup.x0
        for i in range(N):
            x_det[i + 1] = np.einsum("bij,bj->bi", S, x_det[i])
        ys = np.zeros((N, noise.n_modes, nb, 2))
        for k, (b, s) in enumerate(noise.blocks):
            v = np.zeros((nb, 2))
            v[b, s] = 1.0
            v = np.einsum("bij,bj->bi", Tb, v)
            for l in range(N):
                ys[l, k] = v
                v = np.einsum("bij,bj->bi", S, v)
        ys = ys.reshape(N, noise.n_modes, -1)
        grid = uniform_grid(T, N)

        def sample(start, stop):
            return np.stack([np.diff(sample_path(noise, grid, cfg.mc.seed, p).values, axis=0)
                             for p in range(start, stop)])

        inc = np.concatenate(mc_map(sample, cfg.mc.paths, cfg.mc.chunk, cfg.mc.workers))
        ref = run_midpoint_spectral(setup.u0, noise, inc, tau).reshape(len(inc), N + 1, -1)
        for n in levels:
            mesh = _mesh_for(cfg, n)
            op = assemble(mesh)
            proj = _block_projections(setup.modes, mesh, deg)
            P = proj[:, _noise_columns(noise)]
            resp = DgResponse(op, tau, N, project(u0_an, mesh, deg).vector, P, proj, cfg.scheme.solver)

            def errs(start, stop):
                return np.stack([resp.sq_error(resp.coefficients(i, inc[start:stop]), ref[start:stop, i])
                                 for i in range(N + 1)], axis=1)

            e2 = np.concatenate(mc_map(errs, len(inc), cfg.mc.chunk, cfg.mc.workers))
            rms, se, npaths, n_star = _max_over_steps(e2)
            expected = math.sqrt(max(resp.expected_sq_error_discrete(i, x_det[i].reshape(-1), ys, q)
                                     for i in range(N + 1)))
            exact_T = to_analytic(SpectralField(setup.omegas, x_det[-1]), setup.modes)
            perr = error_norm_V(exact_T, project(exact_T, mesh, deg), mesh, deg)
            rows.append([mesh.h, n, rms, se, expected, perr, npaths])
            proj_pts.append((mesh.h, perr))
        lo = 1.3 if cfg.scheme.slope_min is None else cfg.scheme.slope_min

    result.add_table("errors", ["h", "n", "rms_error", "std_error", "expected_rms", "projection_error", "n_paths"],
                     rows)
    fit = fit_slope([(r[0], r[2]) for r in rows])
    result.add_fit("error_vs_h", fit, "h")
    result.add_fit("expected_error_vs_h", fit_slope([(r[0], r[4]) for r in rows]), "h")
    result.add_fit("projection_error_vs_h", fit_slope(proj_pts), "h")
    result.check("slope", fit.slope, fit.slope >= lo, f">= {lo}")
    if cfg.scheme.slope_max is not None:
        result.check("slope_upper", fit.slope, fit.slope <= cfg.scheme.slope_max, f"<= {cfg.scheme.slope_max}")
    result.diagnostics["deterministic"] = noise is None
    return result


def _integrated_rotation(omega: np.ndarray, r0: float, r1: float) -> np.ndarray:
    """``int_{r0}^{r1} exp(omega r J) dr`` per block, shape ``(nb, 2, 2)``."""
    ic = (np.sin(omega * r1) - np.sin(omega * r0)) / omega
    is_ = (np.cos(omega * r0) - np.cos(omega * r1)) / omega
    return np.stack([np.stack([ic, is_], -1), np.stack([-is_, ic], -1)], -2)


def converge_full(cfg: RunConfig) -> RunResult:
    """Coupled refinement in space and time against the exact mild solution."""
    levels = list(cfg.mesh.levels)
    Ns = list(cfg.scheme.steps)
    if len(levels) != len(Ns) or len(levels) < 3:
        raise ConfigError("full convergence pairs mesh levels with step counts (at least three pairs)")
    _check_doubling(levels)
    _check_divides(Ns)
    noise = build_noise(cfg)
    if noise is None:
        raise ConfigError("full convergence needs a noise model")
    setup = spectral_setup(cfg, noise)
    T = cfg.scheme.T
    deg = cfg.scheme.quad_degree
    N0, Nmax = Ns[0], Ns[-1]
    R = cfg.scheme.reference_refinement
    factor = (Nmax // N0) * R
    Nfine = N0 * factor
    u0 = setup.u0
    result = RunResult("converge-full", provenance=_provenance(cfg, "converge-full"))

    def sample(start, stop):
        values = _sample_chunk(noise, T, N0, factor, cfg.mc.seed, start, stop)
        inc = np.diff(values, axis=1)
        ref = exact_flow_trajectory(u0, noise, inc, T / Nfine, stride=Nfine // N0)
        return values[:, :: Nfine // Nmax], ref  # finest scheme grid values, reference at coarse times

    chunks = mc_map(sample, cfg.mc.paths, cfg.mc.chunk, cfg.mc.workers)
    values = np.concatenate([c[0] for c in chunks])
    ref = np.concatenate([c[1] for c in chunks]).reshape(len(values), N0 + 1, -1)
    nb = len(setup.omegas)
    q = noise.variances

    rows = []
    for n_mesh, N in zip(levels, Ns):
        mesh = _mesh_for(cfg, n_mesh)
        op = assemble(mesh)
        proj = _block_projections(setup.modes, mesh, deg)
        P = proj[:, _noise_columns(noise)]
        tau = T / N
        resp = DgResponse(op, tau, N, project(to_analytic(u0, setup.modes), mesh, deg).vector, P, proj,
                          cfg.scheme.solver)
        inc = np.diff(values[:, :: Nmax // N], axis=1)
        stride = N // N0
        e2 = np.stack([resp.sq_error(resp.coefficients(i * stride, inc), ref[:, i]) for i in range(N0 + 1)],
                      axis=1)
        rms, se, npaths, k_star = _max_over_steps(e2)
        # exact expectation against the continuous-time convolution
        exp_vals = []
        for i in range(N0 + 1):
            n = i * stride
            xdet = np.einsum("bij,bj->bi", rotation(setup.omegas, n * tau), setup.x0).reshape(-1)
            c = np.zeros(resp.gram.shape[0])
            c[n] = 1.0
            tot = float(resp.sq_error(c[None], xdet[None])[0])
            for l in range(n):
                Rint = _integrated_rotation(setup.omegas, l * tau, (l + 1) * tau)
                for k, (b, s) in enumerate(noise.blocks):
                    col = N + 1 + l * resp.m + k
                    pb = resp.cross[2 * b: 2 * b + 2, col]
                    tot += q[k] * (tau * resp.gram[col, col] - 2.0 * pb @ Rint[b][:, s] + tau)
            exp_vals.append(tot)
        expected = math.sqrt(max(exp_vals))
        rows.append([mesh.h, n_mesh, tau, N, rms, se, expected, npaths])

    result.add_table("errors", ["h", "n", "tau", "N", "rms_error", "std_error", "expected_rms", "n_paths"], rows)
    fit_h = fit_slope([(r[0], r[4]) for r in rows])
    fit_tau = fit_slope([(r[2], r[4]) for r in rows])
    result.add_fit("error_vs_h", fit_h, "h")
    result.add_fit("error_vs_tau", fit_tau, "tau")
    result.add_fit("expected_error_vs_h", fit_slope([(r[0], r[6]) for r in rows]), "h")
    lo = 1.3 if cfg.scheme.slope_min is None else cfg.scheme.slope_min
    result.check("slope_vs_h", fit_h.slope, fit_h.slope >= lo, f">= {lo}")
    bias = reference_bias(setup.omegas, setup.block_q, T, T / Nfine)
    result.diagnostics.update({"reference_bias": bias, "reference_fine_steps": Nfine,
                               "tau_exponent_vs_h": float(np.polyfit(np.log([r[0] for r in rows]),
                                                                     np.log([r[2] for r in rows]), 1)[0])})
    return result


# ---------------------------------------------------------------------------
# energy


def energy(cfg: RunConfig) -> RunResult:
    """Energy identity ``E||u(T)||^2 = ||u0||^2 + T Tr(Q)`` and the scheme's approach from below."""
    noise = build_noise(cfg)
    if noise is None:
        raise ConfigError("energy study needs a noise model")
    setup = spectral_setup(cfg, noise)
    T = cfg.scheme.T
    target = float(np.sum(setup.x0**2)) + T * noise.trace
    N_exact = max(cfg.scheme.steps)
    u0 = setup.u0
    result = RunResult("energy", provenance=_provenance(cfg, "energy"))

    def flow(start, stop):
        values = _sample_chunk(noise, T, N_exact, 1, cfg.mc.seed, start, stop)
        traj = exact_flow_trajectory(u0, noise, np.diff(values, axis=1), T / N_exact, stride=N_exact)
        return np.sum(traj[:, -1] ** 2, axis=(-2, -1))

    en = np.concatenate(mc_map(flow, cfg.mc.paths, cfg.mc.chunk, cfg.mc.workers))
    mean = float(en.mean())
    se = float(en.std(ddof=1) / math.sqrt(len(en))) if len(en) > 1 else 0.0
    z = abs(mean - target) / se if se > 0 else 0.0
    result.diagnostics.update({"exact_flow_mean_energy": mean, "exact_flow_std_error": se,
                               "target_energy": target, "z_score": z, "n_paths": len(en)})
    result.check("exact_flow_energy_within_3se", z, z <= 3.0, "<= 3")

    levels = list(cfg.mesh.levels)
    Ns = list(cfg.scheme.steps)
    if len(levels) != len(Ns):
        raise ConfigError("energy study pairs mesh levels with step counts")
    rows = []
    deg = cfg.scheme.quad_degree
    for n_mesh, N in zip(levels, Ns):
        mesh = _mesh_for(cfg, n_mesh)
        op = assemble(mesh)
        proj = _block_projections(setup.modes, mesh, deg)
        P = proj[:, _noise_columns(noise)]
        resp = DgResponse(op, T / N, N, project(to_analytic(u0, setup.modes), mesh, deg).vector, P, proj,
                          cfg.scheme.solver)
        exact_e = resp.expected_sq_norm(N, noise.variances)
        grid = uniform_grid(T, N)
        inc = np.stack([np.diff(sample_path(noise, grid, cfg.mc.seed, p).values, axis=0)
                        for p in range(min(cfg.mc.paths, 200))])
        mc = resp.sq_norm(resp.coefficients(N, inc))
        rows.append([mesh.h, n_mesh, T / N, N, exact_e, float(mc.mean()), float(mc.std(ddof=1) / math.sqrt(len(mc))),
                     len(mc), target])
    result.add_table("scheme_energy", ["h", "n", "tau", "N", "expected_energy", "mc_energy", "mc_std_error",
                                       "n_paths", "target"], rows)
    vals = [r[4] for r in rows]
    below = all(v <= target * (1 + 1e-12) for v in vals)
    increasing = all(b >= a for a, b in zip(vals[:-1], vals[1:]))
    result.check("scheme_energy_below_target", max(vals) - target, below, "<= 0")
    result.check("scheme_energy_increases_under_refinement", float(np.min(np.diff(vals))) if len(vals) > 1 else 0.0,
                 increasing, ">= 0")
    return result


# ---------------------------------------------------------------------------
# divergence


def divergence_check(cfg: RunConfig) -> RunResult:
    """Weak divergence residuals along scheme trajectories (plus a negative control)."""
    n_mesh = cfg.mesh.levels[0]
    N = cfg.scheme.steps[0]
    T = cfg.scheme.T
    mesh = _mesh_for(cfg, n_mesh)
    op = assemble(mesh)
    solver = MidpointSolver(op, T / N, method=cfg.scheme.solver)
    noise = build_noise(cfg)
    deg = cfg.scheme.quad_degree
    X = build_test_space(mesh)
    cols = choose_test_functions(X, n_random=cfg.mc.test_functions, seed=cfg.mc.seed)
    result = RunResult("divergence-check", provenance=_provenance(cfg, "divergence-check"))
    u0_vec = project(initial_field(cfg), mesh, deg).vector
    P = projected_modes(noise, mesh, deg) if noise is not None else np.zeros((op.n_dofs, 1))
    n_paths = min(cfg.mc.paths, 8) if noise is not None else 1
    grid = uniform_grid(T, N)
    if noise is not None:
        inc = np.stack([sample_path(noise, grid, cfg.mc.seed, p).increments for p in range(n_paths)])
    else:
        inc = np.zeros((1, N, 1))
    states = run_batch(solver, u0_vec, P, inc, keep_all=True)
    rows = []
    worst, drift = 0.0, 0.0
    for p in range(n_paths):
        rep = divergence_report(states[p], X, cols, seed=cfg.mc.seed)
        mx = rep.max_per_step()
        dr = rep.drift_per_step()
        worst = max(worst, float(mx.max()))
        drift = max(drift, float(dr.max()))
        rows.extend([[p, n, float(mx[n]), float(dr[n])] for n in range(len(mx))])
        if p == 0:
            first = rep
    result.add_table("residual_per_step", ["path", "step", "max_scaled_residual", "scaled_drift"], rows)
    detail = []
    for n in range(first.residual_E.shape[0]):
        for j, c in enumerate(first.columns):
            detail.append([n, int(c), "E", float(first.residual_E[n, j]), float(first.scale_E[n, j])])
            detail.append([n, int(c), "H", float(first.residual_H[n, j]), float(first.scale_H[n, j])])
    result.add_table("residuals", ["step", "basis_id", "part", "residual", "scale"], detail)

    # negative control: E = (x1, 0, 0) is not divergence free
    bad = project(AnalyticField(lambda x: np.concatenate([x[:, :1], np.zeros((len(x), 5))], axis=1)), mesh, deg)
    bad_states = run_batch(solver, bad.vector, P, inc[:1], keep_all=True)[0]
    bad_rep = divergence_report(bad_states, X, cols, seed=cfg.mc.seed)
    control = float(bad_rep.max_per_step()[0])
    control_drift = float(bad_rep.drift_per_step().max())
    divergence_free = cfg.scheme.u0 != "linear-x"
    result.diagnostics.update({"n_test_functions": len(cols), "test_function_seed": cfg.mc.seed,
                               "test_space_dim": X.dim, "n_paths": n_paths, "max_scaled_residual": worst,
                               "max_scaled_drift": drift, "negative_control_residual": control,
                               "negative_control_drift": control_drift})
    if divergence_free:
        result.check("max_scaled_residual", worst, worst <= 1e-9, "<= 1e-9")
    result.check("step_constancy", max(drift, control_drift), max(drift, control_drift) <= 1e-9, "<= 1e-9")
    result.check("negative_control", control, control > 1e-3, "> 1e-3")
    result.check("test_function_count", len(cols), len(cols) >= min(200, X.dim), f">= {min(200, X.dim)}")
    return result


# ---------------------------------------------------------------------------
# large deviation rate gaps


def _rate_data(setup: SpectralSetup, T: float) -> SpectralField:
    """Target ``v = S(T) u0 + sum_b sqrt(q_b) (1, 1/2)``: finite rate, every noise block involved."""
    drift = np.einsum("bij,bj->bi", rotation(setup.omegas, T), setup.x0)
    disp = np.sqrt(setup.block_q) * np.array([1.0, 0.5])
    return SpectralField(setup.omegas, drift + disp)


def ldp_gap(cfg: RunConfig) -> RunResult:
    """Rate-function gap between exact and midpoint discretizations, plus a dG covariance cross-check."""
    noise = build_noise(cfg)
    if noise is None:
        raise ConfigError("rate functions need a noise model")
    setup = spectral_setup(cfg, noise)
    T = cfg.scheme.T
    Ns = sorted(set(cfg.scheme.steps))
    v = _rate_data(setup, T)
    # extend noise to the setup blocks: blocks without noise are absent from the covariance
    rows = rate_gap_table(v, setup.u0, _extended_noise(noise, setup), T, Ns)
    result = RunResult("ldp-gap", provenance=_provenance(cfg, "ldp-gap"))
    result.add_table("rate_gap", ["tau", "rate_exact", "rate_discrete", "gap"], rows)
    fit = fit_slope([(r[0], r[3]) for r in rows])
    result.add_fit("gap_vs_tau", fit, "tau")
    k = cfg.noise.k if cfg.noise.kind == "critical" else 2
    lo = (0.9 if k == 2 else 0.4) if cfg.scheme.slope_min is None else cfg.scheme.slope_min
    result.check("gap_slope", fit.slope, fit.slope >= lo, f">= {lo}")

    # full-discretization covariance on the smallest mesh: SVD rate vs brute-force covariance
    mesh = _mesh_for(cfg, cfg.mesh.levels[0])
    op = assemble(mesh)
    deg = cfg.scheme.quad_degree
    n_blocks = min(2, len(noise.cavity_modes))
    small = commuting_noise_from_modes(noise.cavity_modes[:n_blocks], noise.block_variances()[:n_blocks, 0])
    P = projected_modes(small, mesh, deg)
    N = Ns[0]
    vecs = full_rate_vectors(op, P, small.variances, T, N)
    rng = np.random.default_rng(cfg.mc.seed)
    z = rng.standard_normal(vecs.shape[1])
    u0h = project(initial_field(cfg), mesh, deg).vector
    drift = propagate_deterministic(MidpointSolver(op, T / N), u0h, N)[-1]
    vh = drift + vecs @ z
    svd = rate_full_details(vh, u0h, op, P, small.variances, T, N, vectors=vecs)
    brute = brute_force_rate(vh - drift, vecs)
    rel = abs(svd.value - brute) / max(abs(brute), 1e-300)
    result.diagnostics.update({"rate_full_svd": svd.value, "rate_full_brute_force": brute,
                               "rate_full_rank": svd.rank, "rate_full_vectors": svd.n_vectors,
                               "cross_check_mesh_elements": mesh.n_elements})
    result.check("rate_full_vs_brute_force", rel, rel <= 1e-8, "<= 1e-8")
    return result


def _extended_noise(noise: NoiseModel, setup: SpectralSetup) -> NoiseModel:
    if len(setup.modes) == len(noise.cavity_modes):
        return noise
    return NoiseModel(noise.fields, noise.variances, True, tuple(setup.modes), noise.blocks, noise.label)


# ---------------------------------------------------------------------------
# export


def export_vtk(cfg: RunConfig, out_dir: str) -> RunResult:
    """Run one path on the first mesh level and write VTK snapshots (and optionally A, B)."""
    from .vtk import write_vtk

    n_mesh = cfg.mesh.levels[0]
    N = cfg.scheme.steps[0]
    T = cfg.scheme.T
    mesh = _mesh_for(cfg, n_mesh)
    op = assemble(mesh)
    noise = build_noise(cfg)
    deg = cfg.scheme.quad_degree
    solver = MidpointSolver(op, T / N, method=cfg.scheme.solver)
    P = projected_modes(noise, mesh, deg) if noise is not None else np.zeros((op.n_dofs, 1))
    inc = (sample_path(noise, uniform_grid(T, N), cfg.mc.seed, 0).increments[None] if noise is not None
           else np.zeros((1, N, 1)))
    states = run_batch(solver, project(initial_field(cfg), mesh, deg).vector, P, inc, keep_all=True)[0]
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for n in range(0, N + 1, max(1, cfg.output.vtk_stride)):
        path = os.path.join(out_dir, f"snapshot_{n:05d}.vtk")
        write_vtk(path, mesh, DgField(mesh, states[n]), title=f"step {n} t={n * T / N:.6g}")
        files.append(os.path.basename(path))
    if cfg.output.export_matrices:
        files.extend(os.path.basename(p) for p in op.export_matrix_market(out_dir))
    result = RunResult("export-vtk", provenance=_provenance(cfg, "export-vtk"))
    result.add_table("files", ["file"], [[f] for f in files])
    result.diagnostics.update({"n_elements": mesh.n_elements, "n_dofs": op.n_dofs})
    return result


EXPERIMENTS = {
    "converge-time": converge_time,
    "converge-space": converge_space,
    "converge-full": converge_full,
    "divergence-check": divergence_check,
    "energy": energy,
    "ldp-gap": ldp_gap,
}
