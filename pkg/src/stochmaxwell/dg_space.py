"""Piecewise-linear discontinuous fields, the weighted inner product and L2 projection.

Coefficients of a field are stored as an array of shape ``(n_elements, 6, 4)``:
element, component (E1, E2, E3, H1, H2, H3), local nodal P1 basis function.
The flat coefficient index is ``(K * 6 + c) * 4 + i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import LOCAL_FACES, Mesh
from .quadrature import tet_rule, triangle_rule

__all__ = [
    "AnalyticField",
    "DgField",
    "MassStructure",
    "mass_structure",
    "inner_product_V",
    "norm_V",
    "project",
    "face_jump",
    "face_trace",
    "broken_seminorm",
    "analytic_norm_V",
    "error_norm_V",
    "face_error_norm",
    "evaluate",
    "flat_index",
    "DEFAULT_QUAD_DEGREE",
]

DEFAULT_QUAD_DEGREE = 8

# P1 Gram matrix on the reference simplex, scaled by volume: |K|/20 * (I + 11^T)
_P1_GRAM = (np.eye(4) + np.ones((4, 4))) / 20.0


def flat_index(element, component, local):
    return (np.asarray(element) * 6 + np.asarray(component)) * 4 + np.asarray(local)


@dataclass(frozen=True)
class AnalyticField:
    """A closed-form six-component field ``x -> (E(x), H(x))``.

    ``func`` maps points of shape ``(npts, 3)`` to values of shape ``(npts, 6)``.
    ``curl`` (same signature) returns ``(curl E, curl H)``; ``divergence``
    returns ``(div E, div H)`` with shape ``(npts, 2)``. ``jacobian`` returns
    ``(npts, 6, 3)`` and ``hessian`` ``(npts, 6, 3, 3)``. Missing derivatives
    fall back to central differences where an operation needs them.
    """

    func: Callable[[np.ndarray], np.ndarray]
    curl: Optional[Callable[[np.ndarray], np.ndarray]] = None
    divergence: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.func(x), dtype=float).reshape(len(x), 6)

    def scaled(self, factor: float) -> "AnalyticField":
        def wrap(fn):
            return None if fn is None else (lambda x: factor * fn(x))
        return AnalyticField(
            wrap(self.func), wrap(self.curl), wrap(self.divergence),
            wrap(self.jacobian), wrap(self.hessian),
        )

    @staticmethod
    def combine(fields, weights) -> "AnalyticField":
        """Linear combination ``sum_i w_i f_i``; derivatives are kept only if all provide them."""
        fields = list(fields)
        weights = [float(w) for w in weights]

        def lin(attr):
            fns = [getattr(f, attr) for f in fields]
            if any(fn is None for fn in fns):
                return None
            return lambda x: sum(w * fn(x) for w, fn in zip(weights, fns))

        return AnalyticField(lin("func"), lin("curl"), lin("divergence"), lin("jacobian"), lin("hessian"))


@dataclass(frozen=True, eq=False)
class DgField:
    """Element of the discrete space ``P1(T_h)^6`` on ``mesh``."""

    mesh: Mesh
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.size != self.mesh.n_dofs:
            raise ValueError(f"coefficient size {c.size} does not match mesh ({self.mesh.n_dofs} dofs)")
        object.__setattr__(self, "coeffs", c.reshape(self.mesh.n_elements, 6, 4))

    @classmethod
    def zeros(cls, mesh: Mesh) -> "DgField":
        return cls(mesh, np.zeros(mesh.n_dofs))

    @classmethod
    def from_vector(cls, mesh: Mesh, vec: np.ndarray) -> "DgField":
        return cls(mesh, np.array(vec, dtype=float))

    @property
    def vector(self) -> np.ndarray:
        return self.coeffs.reshape(-1)

    @property
    def E(self) -> np.ndarray:
        return self.coeffs[:, :3, :]

    @property
    def H(self) -> np.ndarray:
        return self.coeffs[:, 3:, :]

    def __add__(self, other: "DgField") -> "DgField":
        _check_same_mesh(self, other)
        return DgField(self.mesh, self.coeffs + other.coeffs)

    def __sub__(self, other: "DgField") -> "DgField":
        _check_same_mesh(self, other)
        return DgField(self.mesh, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "DgField":
        return DgField(self.mesh, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __call__(self, elements: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """Evaluate inside ``elements`` at barycentric points ``(npts, 4)``; returns ``(npts, 6)``.

        Only the coefficients of the named element are used.
        """
        return np.einsum("pci,pi->pc", self.coeffs[np.asarray(elements)], bary)


def _check_same_mesh(u: DgField, v: DgField) -> None:
    if u.mesh is not v.mesh:
        raise ValueError("fields live on different meshes")


@dataclass(frozen=True, eq=False)
class MassStructure:
    """Block-diagonal weighted mass: per element, ``w_c |K| / 20 (I + 11^T)``.

    ``weights`` has shape ``(ne, 6)`` with ``eps_K`` on E components and
    ``mu_K`` on H components.
    """

    mesh: Mesh
    weights: np.ndarray

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        """Mass times coefficient array; accepts trailing batch axis on flat input."""
        c, batch = _as_blocks(self.mesh, coeffs)
        scale = (self.weights * self.mesh.volumes[:, None] / 20.0)[..., None]
        if batch:
            scale = scale[..., None]
        out = scale * (c + c.sum(axis=2, keepdims=True))
        return out.reshape(np.shape(coeffs))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Inverse mass; uses ``(I + 11^T)^{-1} = I - 11^T / 5``."""
        c, batch = _as_blocks(self.mesh, rhs)
        scale = (20.0 / (self.weights * self.mesh.volumes[:, None]))[..., None]
        if batch:
            scale = scale[..., None]
        out = scale * (c - c.sum(axis=2, keepdims=True) / 5.0)
        return out.reshape(np.shape(rhs))

    def apply_sqrt(self, coeffs: np.ndarray) -> np.ndarray:
        """Symmetric square root ``A^{1/2}``: ``sqrt(w|K|/20) (I + a 11^T)`` with ``(1 + 4a)^2 = 5``."""
        c, batch = _as_blocks(self.mesh, coeffs)
        scale = np.sqrt(self.weights * self.mesh.volumes[:, None] / 20.0)[..., None]
        if batch:
            scale = scale[..., None]
        a = (np.sqrt(5.0) - 1.0) / 4.0
        out = scale * (c + a * c.sum(axis=2, keepdims=True))
        return out.reshape(np.shape(coeffs))

    def matrix(self) -> sp.csr_matrix:
        return self._block_matrix(self.weights * self.mesh.volumes[:, None], _P1_GRAM)

    def inverse_matrix(self) -> sp.csr_matrix:
        return self._block_matrix(1.0 / (self.weights * self.mesh.volumes[:, None]),
                                  20.0 * (np.eye(4) - np.ones((4, 4)) / 5.0))

    def _block_matrix(self, scale: np.ndarray, block: np.ndarray) -> sp.csr_matrix:
        ne = self.mesh.n_elements
        blocks = scale[:, :, None, None] * block
        rows = flat_index(np.arange(ne)[:, None, None, None], np.arange(6)[None, :, None, None],
                          np.arange(4)[None, None, :, None])
        cols = flat_index(np.arange(ne)[:, None, None, None], np.arange(6)[None, :, None, None],
                          np.arange(4)[None, None, None, :])
        rows, cols = np.broadcast_arrays(rows, cols)
        n = self.mesh.n_dofs
        return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))


def _as_blocks(mesh: Mesh, coeffs: np.ndarray):
    a = np.asarray(coeffs, dtype=float)
    if a.ndim == 2 and a.shape[0] == mesh.n_dofs:
        return a.reshape(mesh.n_elements, 6, 4, a.shape[1]), True
    return a.reshape(mesh.n_elements, 6, 4), False


def mass_structure(mesh: Mesh) -> MassStructure:
    w = np.empty((mesh.n_elements, 6))
    w[:, :3] = mesh.eps[:, None]
    w[:, 3:] = mesh.mu[:, None]
    w.setflags(write=False)
    return MassStructure(mesh, w)


def inner_product_V(u: DgField, v: DgField) -> float:
    """``int_D eps E_u . E_v + mu H_u . H_v dx``, exact for P1 fields."""
    _check_same_mesh(u, v)
    mass = mass_structure(u.mesh)
    return float(np.dot(mass.apply(u.coeffs).ravel(), v.coeffs.ravel()))


def norm_V(u: DgField) -> float:
    return float(np.sqrt(max(inner_product_V(u, u), 0.0)))


def _quad_points(mesh: Mesh, degree: int, elements: np.ndarray):
    lam, w = tet_rule(degree)
    x = mesh.vertices[mesh.elements[elements]]  # (ne, 4, 3)
    pts = np.einsum("qi,eid->eqd", lam, x)
    wts = mesh.volumes[elements][:, None] * w[None, :]
    return pts, wts, lam


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def project(f: AnalyticField, mesh: Mesh, degree: int = DEFAULT_QUAD_DEGREE) -> DgField:
    """Element-wise L2 projection of ``f`` onto ``P1(T_h)^6``.

    With piecewise-constant coefficients the weighted projection coincides with
    the componentwise unweighted one, so each element solves a 4x4 Gram system.
    """
    lam_count = len(tet_rule(degree)[1])
    chunk = max(1, 400_000 // lam_count)
    coeffs = np.empty((mesh.n_elements, 6, 4))
    gram_inv = np.linalg.inv(_P1_GRAM)
    for idx in _chunks(mesh.n_elements, chunk):
        pts, wts, lam = _quad_points(mesh, degree, idx)
        vals = f(pts.reshape(-1, 3)).reshape(len(idx), -1, 6)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite field values during projection")
        moments = np.einsum("eq,eqc,qi->eci", wts, vals, lam)
        coeffs[idx] = np.einsum("ij,ecj->eci", gram_inv, moments) / mesh.volumes[idx][:, None, None]
    return DgField(mesh, coeffs)


def evaluate(u: DgField, points: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Evaluate ``u`` at physical points known to lie in the given elements."""
    mesh = u.mesh
    x = mesh.vertices[mesh.elements[elements]]
    jac = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)
    rel = np.linalg.solve(jac, (points - x[:, 0, :])[..., None])[..., 0]
    bary = np.concatenate([1 - rel.sum(axis=1, keepdims=True), rel], axis=1)
    return u(elements, bary)


def analytic_norm_V(f: AnalyticField, mesh: Mesh, degree: int = DEFAULT_QUAD_DEGREE) -> float:
    """``||f||_V`` by element quadrature with the mesh coefficients."""
    return error_norm_V(f, None, mesh, degree)


def error_norm_V(f: AnalyticField, u: Optional[DgField], mesh: Mesh,
                 degree: int = DEFAULT_QUAD_DEGREE) -> float:
    """``||f - u||_V`` by element quadrature (``u=None`` gives ``||f||_V``)."""
    lam_count = len(tet_rule(degree)[1])
    chunk = max(1, 400_000 // lam_count)
    total = 0.0
    w = np.empty((mesh.n_elements, 6))
    w[:, :3] = mesh.eps[:, None]
    w[:, 3:] = mesh.mu[:, None]
    for idx in _chunks(mesh.n_elements, chunk):
        pts, wts, lam = _quad_points(mesh, degree, idx)
        vals = f(pts.reshape(-1, 3)).reshape(len(idx), -1, 6)
        if u is not None:
            vals = vals - np.einsum("eci,qi->eqc", u.coeffs[idx], lam)
        total += float(np.einsum("eq,eqc,ec->", wts, vals**2, w[idx]))
    return float(np.sqrt(total))


def face_error_norm(f: AnalyticField, u: Optional[DgField], mesh: Mesh, degree: int = DEFAULT_QUAD_DEGREE) -> float:
    """``(sum_K sum_{F in dK} ||w^(1/2) (f - u|_K)||^2_{L2(F)})^(1/2)``: element traces on every face.

    Interior faces are visited from both sides, so discontinuous ``u`` is
    measured with each of its traces.
    """
    lam_f, wts = triangle_rule(degree)
    verts = mesh.vertices[mesh.elements]  # (ne, 4, 3)
    w = np.empty((mesh.n_elements, 6))
    w[:, :3] = mesh.eps[:, None]
    w[:, 3:] = mesh.mu[:, None]
    total = 0.0
    for i, local in enumerate(LOCAL_FACES):
        fv = verts[:, local]  # (ne, 3, 3)
        area = 0.5 * np.linalg.norm(np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0]), axis=1)
        pts = np.einsum("qj,ejd->eqd", lam_f, fv)
        vals = f(pts.reshape(-1, 3)).reshape(mesh.n_elements, -1, 6)
        if u is not None:
            bary = np.zeros((len(lam_f), 4))
            bary[:, local] = lam_f
            vals = vals - np.einsum("eci,qi->eqc", u.coeffs, bary)
        total += float(np.einsum("e,q,eqc,ec->", area, wts, vals**2, w))
    return float(np.sqrt(total))


def face_trace(u: DgField, face: int, side: str = "owner") -> np.ndarray:
    """Nodal values ``(3, 6)`` of the trace of ``u`` at the face vertices from one side."""
    mesh = u.mesh
    if side == "owner":
        elem, loc = mesh.face_owner[face], mesh.owner_face_nodes()[face]
    elif side == "neighbor":
        if mesh.face_neighbor[face] < 0:
            raise ValueError("exterior face has no neighbour")
        elem, loc = mesh.face_neighbor[face], mesh.neighbor_face_nodes()[face]
    else:
        raise ValueError(f"unknown side {side!r}")
    return u.coeffs[elem][:, loc].T


def face_jump(u: DgField, face: int) -> np.ndarray:
    """``[[u]]_F = u_{K_F}|_F - u_K|_F`` as P1 nodal values ``(3, 6)`` at the face vertices.

    The vertex order is that of ``mesh.faces[face]``.
    """
    if u.mesh.face_neighbor[face] < 0:
        raise ValueError(f"face {face} is exterior; jumps are defined on interior faces only")
    return face_trace(u, face, "neighbor") - face_trace(u, face, "owner")


def _fd_jacobian(f: AnalyticField, x: np.ndarray, step: float) -> np.ndarray:
    out = np.empty((len(x), 6, 3))
    for d in range(3):
        e = np.zeros(3)
        e[d] = step
        out[:, :, d] = (f(x + e) - f(x - e)) / (2 * step)
    return out


def _fd_hessian(f: AnalyticField, x: np.ndarray, step: float) -> np.ndarray:
    if f.jacobian is not None:
        out = np.empty((len(x), 6, 3, 3))
        for d in range(3):
            e = np.zeros(3)
            e[d] = step
            out[..., d] = (f.jacobian(x + e) - f.jacobian(x - e)) / (2 * step)
        return out
    out = np.empty((len(x), 6, 3, 3))
    f0 = f(x)
    for a in range(3):
        for b in range(a, 3):
            ea = np.zeros(3)
            eb = np.zeros(3)
            ea[a] = step
            eb[b] = step
            if a == b:
                val = (f(x + ea) - 2 * f0 + f(x - ea)) / step**2
            else:
                val = (f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)) / (4 * step**2)
            out[..., a, b] = val
            out[..., b, a] = val
    return out


def broken_seminorm(f: AnalyticField, mesh: Mesh, k: int, degree: int = DEFAULT_QUAD_DEGREE,
                    allow_fd: bool = True, fd_step: Optional[float] = None) -> float:
    """Broken ``H^k(T_h)`` seminorm of ``f`` (all six components, unweighted).

    Uses ``f.jacobian`` / ``f.hessian`` when given. Otherwise central
    differences with step ``1e-5 h`` (first derivatives) or ``1e-3 h`` (second
    derivatives) are used; these are accurate to roughly 1e-8 relative only.
    """
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    exact = f.jacobian if k == 1 else f.hessian
    if exact is None and not allow_fd:
        raise ValueError(f"field has no analytic derivatives of order {k} and finite differences are disabled")
    if fd_step is None:
        fd_step = (1e-5 if k == 1 else 1e-3) * mesh.h
    lam_count = len(tet_rule(degree)[1])
    chunk = max(1, 100_000 // lam_count)
    total = 0.0
    for idx in _chunks(mesh.n_elements, chunk):
        pts, wts, _ = _quad_points(mesh, degree, idx)
        flat = pts.reshape(-1, 3)
        if exact is not None:
            d = np.asarray(exact(flat))
        elif k == 1:
            d = _fd_jacobian(f, flat, fd_step)
        else:
            d = _fd_hessian(f, flat, fd_step)
        sq = (d.reshape(len(flat), -1) ** 2).sum(axis=1).reshape(len(idx), -1)
        total += float(np.sum(wts * sq))
    return float(np.sqrt(total))
