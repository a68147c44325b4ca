"""Weak divergence diagnostics against continuous P2 test functions with zero trace.

For ``phi`` in the test space the gradient is piecewise linear, so
``grad(phi)`` is itself a dG field. The weak divergence of ``eps E_h`` is then
``-<u_h, (grad phi, 0)>_V``, which is an exact coefficient-space product.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .dg_space import DgField
from .mesh import Mesh
from .quadrature import tet_rule

__all__ = [
    "TestSpaceXh",
    "build_test_space",
    "weak_divergence",
    "weak_divergence_all",
    "choose_test_functions",
    "DivergenceReport",
    "divergence_report",
    "basis_integral",
]

_LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


@dataclass(frozen=True, eq=False)
class TestSpaceXh:
    """Continuous P2 functions vanishing on the boundary.

    Global nodes are the mesh vertices followed by the edges; only interior
    nodes carry basis functions. ``grad`` is a sparse ``(24 ne, dim)`` matrix
    whose column ``k`` holds the dG coefficients of ``grad(phi_k)`` placed in
    the E slots (components 0-2) of the coefficient layout.
    """

    mesh: Mesh
    edges: np.ndarray  # (n_edges, 2) vertex indices
    element_nodes: np.ndarray  # (ne, 10) global node ids (4 vertices then 6 edges)
    node_points: np.ndarray  # (n_nodes, 3)
    free_nodes: np.ndarray  # global node ids of basis functions
    grad: sp.csc_matrix

    @property
    def dim(self) -> int:
        return len(self.free_nodes)

    def is_vertex(self, k) -> np.ndarray:
        return self.free_nodes[np.asarray(k)] < len(self.mesh.vertices)

    def gradient_field(self, k: int, target: str = "E") -> DgField:
        col = self.grad[:, k].toarray().ravel()
        if target == "H":
            col = _shift_to_H(col, self.mesh)
        return DgField(self.mesh, col)

    def gradients(self, target: str = "E") -> sp.csr_matrix:
        if target == "E":
            return self.grad
        perm = _h_permutation(self.mesh)
        return self.grad[perm, :]

    def evaluate(self, k: int, points: np.ndarray, elements: np.ndarray) -> np.ndarray:
        """Value of basis function ``k`` at physical points inside the given elements."""
        mesh = self.mesh
        x = mesh.vertices[mesh.elements[elements]]
        jac = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)
        rel = np.linalg.solve(jac, (points - x[:, 0, :])[..., None])[..., 0]
        lam = np.concatenate([1 - rel.sum(axis=1, keepdims=True), rel], axis=1)
        shapes = _p2_shapes(lam)
        node = self.free_nodes[k]
        hit = self.element_nodes[elements] == node
        return np.sum(shapes * hit, axis=1)


def _shift_to_H(col: np.ndarray, mesh: Mesh) -> np.ndarray:
    c = col.reshape(mesh.n_elements, 6, 4)
    out = np.zeros_like(c)
    out[:, 3:, :] = c[:, :3, :]
    return out.reshape(-1)


def _h_permutation(mesh: Mesh) -> np.ndarray:
    """Row permutation mapping E-slot rows onto H slots (and H onto E)."""
    idx = np.arange(mesh.n_dofs).reshape(mesh.n_elements, 6, 4)
    return np.concatenate([idx[:, 3:, :], idx[:, :3, :]], axis=1).reshape(-1)


def _p2_shapes(lam: np.ndarray) -> np.ndarray:
    """P2 nodal shape functions at barycentric points: 4 vertex then 6 edge functions."""
    v = lam * (2 * lam - 1)
    e = 4 * lam[..., _LOCAL_EDGES[:, 0]] * lam[..., _LOCAL_EDGES[:, 1]]
    return np.concatenate([v, e], axis=-1)


def build_test_space(mesh: Mesh) -> TestSpaceXh:
    nv = len(mesh.vertices)
    ne = mesh.n_elements
    local_edges = np.sort(mesh.elements[:, _LOCAL_EDGES], axis=2)  # (ne, 6, 2)
    edges, inv = np.unique(local_edges.reshape(-1, 2), axis=0, return_inverse=True)
    element_nodes = np.concatenate([mesh.elements, nv + inv.reshape(ne, 6)], axis=1)
    points = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])

    lo, hi = np.asarray(mesh.domain.lower), np.asarray(mesh.domain.upper)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(np.concatenate([lo, hi])))))
    on_boundary = np.any((np.abs(points - lo) <= tol) | (np.abs(points - hi) <= tol), axis=1)
    free = np.flatnonzero(~on_boundary)
    column = np.full(len(points), -1, dtype=np.int64)
    column[free] = np.arange(len(free))

    # nodal values of gradients: vertex function i at local vertex k: (4 delta_ik - 1) grad lam_i
    g = mesh.barycentric_gradients()  # (ne, 4, 3)
    rows, cols, vals = [], [], []
    K = np.arange(ne)
    for i in range(4):
        for k in range(4):
            coef = 4.0 * (i == k) - 1.0
            for d in range(3):
                rows.append((K * 6 + d) * 4 + k)
                cols.append(column[element_nodes[:, i]])
                vals.append(coef * g[:, i, d])
    # edge function (i, j) at local vertex k: 4 (delta_jk grad lam_i + delta_ik grad lam_j)
    for e, (i, j) in enumerate(_LOCAL_EDGES):
        for k in (i, j):
            other = j if k == i else i
            for d in range(3):
                rows.append((K * 6 + d) * 4 + k)
                cols.append(column[element_nodes[:, 4 + e]])
                vals.append(4.0 * g[:, other, d])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = cols >= 0
    grad = sp.csc_matrix((vals[keep], (rows[keep], cols[keep])), shape=(mesh.n_dofs, len(free)))
    for a in (edges, element_nodes, points, free):
        a.setflags(write=False)
    return TestSpaceXh(mesh, edges, element_nodes, points, free, grad)


def weak_divergence(u: DgField, X: TestSpaceXh, k: int, part: str = "E") -> float:
    """``-int (eps E_h) . grad(phi_k)`` (``part="E"``) or ``-int (mu H_h) . grad(phi_k)`` (``part="H"``)."""
    if u.mesh is not X.mesh:
        raise ValueError("field and test space live on different meshes")
    g = X.gradient_field(k, part)
    from .dg_space import inner_product_V
    return -inner_product_V(u, g)


def weak_divergence_all(U: np.ndarray, X: TestSpaceXh, part: str = "E",
                        columns: Optional[np.ndarray] = None) -> np.ndarray:
    """Weak divergences for coefficient vectors ``U`` (``(N_h,)`` or ``(batch, N_h)``) and many test functions."""
    from .dg_space import mass_structure
    G = X.gradients(part)
    if columns is not None:
        G = G[:, columns]
    mass = mass_structure(X.mesh)
    U = np.atleast_2d(U)
    AU = mass.apply(U.T)
    return -(G.T @ AU).T


def _gradient_norms(X: TestSpaceXh, columns: np.ndarray) -> np.ndarray:
    """``||grad phi_k||_{L2}`` (unweighted)."""
    mesh = X.mesh
    G = X.grad[:, columns].toarray().reshape(mesh.n_elements, 6, 4, -1)[:, :3]
    GG = G + G.sum(axis=2, keepdims=True)
    sq = np.einsum("e,ecik,ecik->k", mesh.volumes / 20.0, G, GG)
    return np.sqrt(sq)


def _weighted_field_norm(U: np.ndarray, mesh: Mesh, part: str) -> np.ndarray:
    """``||eps E_h||_{L2}`` or ``||mu H_h||_{L2}`` for each row of ``U``."""
    c = np.atleast_2d(U).reshape(-1, mesh.n_elements, 6, 4)
    w = mesh.eps if part == "E" else mesh.mu
    sl = slice(0, 3) if part == "E" else slice(3, 6)
    f = c[:, :, sl, :] * w[None, :, None, None]
    sq = np.einsum("e,beci,beci->b", mesh.volumes / 20.0, f, f + f.sum(axis=3, keepdims=True))
    return np.sqrt(sq)


def choose_test_functions(X: TestSpaceXh, n_random: int = 200, seed: int = 0,
                          center_radius: Optional[float] = None) -> np.ndarray:
    """Random subset of basis indices plus every function whose node lies near the domain centre."""
    rng = np.random.default_rng(seed)
    n_random = min(n_random, X.dim)
    picked = rng.choice(X.dim, size=n_random, replace=False)
    centre = 0.5 * (np.asarray(X.mesh.domain.lower) + np.asarray(X.mesh.domain.upper))
    if center_radius is None:
        center_radius = X.mesh.h
    near = np.flatnonzero(np.linalg.norm(X.node_points[X.free_nodes] - centre, axis=1) <= center_radius)
    return np.unique(np.concatenate([picked, near]))


def basis_integral(X: TestSpaceXh, k: int, degree: int = 4) -> float:
    """``int_D phi_k dx`` by element quadrature."""
    lam, w = tet_rule(degree)
    node = X.free_nodes[k]
    elems = np.flatnonzero(np.any(X.element_nodes == node, axis=1))
    shapes = _p2_shapes(lam)  # (nq, 10)
    total = 0.0
    for K in elems:
        loc = int(np.flatnonzero(X.element_nodes[K] == node)[0])
        total += X.mesh.volumes[K] * float(w @ shapes[:, loc])
    return total


@dataclass(frozen=True)
class DivergenceReport:
    """Scaled weak residuals per step: ``|div| / (||w F||_{L2} ||grad phi||_{L2})``."""

    columns: np.ndarray
    residual_E: np.ndarray  # (steps, n_columns) raw values
    residual_H: np.ndarray
    scale_E: np.ndarray  # (steps, n_columns)
    scale_H: np.ndarray
    seed: int

    @property
    def scaled_E(self) -> np.ndarray:
        return np.abs(self.residual_E) / np.maximum(self.scale_E, np.finfo(float).tiny)

    @property
    def scaled_H(self) -> np.ndarray:
        return np.abs(self.residual_H) / np.maximum(self.scale_H, np.finfo(float).tiny)

    def max_per_step(self) -> np.ndarray:
        return np.maximum(self.scaled_E.max(axis=1), self.scaled_H.max(axis=1))

    def drift_per_step(self) -> np.ndarray:
        """Scaled change of the functional relative to step 0 (conservation check)."""
        dE = np.abs(self.residual_E - self.residual_E[0]) / np.maximum(self.scale_E, np.finfo(float).tiny)
        dH = np.abs(self.residual_H - self.residual_H[0]) / np.maximum(self.scale_H, np.finfo(float).tiny)
        return np.maximum(dE.max(axis=1), dH.max(axis=1))

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "basis_id", "part", "residual", "scale"])
            for n in range(self.residual_E.shape[0]):
                for j, col in enumerate(self.columns):
                    wr.writerow([n, int(col), "E", repr(float(self.residual_E[n, j])), repr(float(self.scale_E[n, j]))])
                    wr.writerow([n, int(col), "H", repr(float(self.residual_H[n, j])), repr(float(self.scale_H[n, j]))])


def divergence_report(states: np.ndarray, X: TestSpaceXh, columns: Optional[np.ndarray] = None,
                      seed: int = 0, n_random: int = 200) -> DivergenceReport:
    """Weak residual table for a trajectory ``states`` of shape ``(steps, N_h)``.

    The scale uses the norm of the initial state, so that the step-to-step
    comparison of raw values is meaningful even when the field decays.
    """
    if columns is None:
        columns = choose_test_functions(X, n_random=n_random, seed=seed)
    states = np.atleast_2d(states)
    rE = weak_divergence_all(states, X, "E", columns)
    rH = weak_divergence_all(states, X, "H", columns)
    gn = _gradient_norms(X, columns)
    nE = _weighted_field_norm(states, X.mesh, "E")
    nH = _weighted_field_norm(states, X.mesh, "H")
    ref = max(float(nE.max()), float(nH.max()), np.finfo(float).tiny)
    scale = np.broadcast_to(ref * gn[None, :], rE.shape)
    return DivergenceReport(np.asarray(columns), rE, rH, scale.copy(), scale.copy(), seed)
