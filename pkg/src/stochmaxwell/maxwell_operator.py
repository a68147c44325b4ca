"""Upwind-flux discontinuous Galerkin discretization of the Maxwell operator.

The operator is kept in the mass-weighted form used by the SODE
``A du = B u dt - A P dW``: ``A`` is the block-diagonal weighted mass matrix and
``B[i, j] = <M_h phi_j, phi_i>_V`` is the bilinear form evaluated on basis
fields. Applying ``M_h`` to coefficients therefore means ``A^{-1} B``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.io
import scipy.sparse as sp

from .dg_space import AnalyticField, DgField, MassStructure, mass_structure
from .mesh import Mesh
from .quadrature import tet_rule, triangle_rule

__all__ = [
    "FluxCoefficients",
    "DiscreteMaxwellOperator",
    "flux_coefficients",
    "mesh_flux_coefficients",
    "assemble",
    "mixed_load",
    "mixed_form",
    "dissipation_face_sum",
    "cross_matrix",
]

# P1 face Gram matrix scaled by area; exact (edge-midpoint rule integrates quadratics)
_FACE_GRAM = (np.eye(3) + np.ones((3, 3))) / 12.0


@dataclass(frozen=True)
class FluxCoefficients:
    """Upwind weights of a face (arrays allowed for vectorized use).

    For an exterior face the neighbour quantities are those of a mirrored
    ghost element, so ``alpha_K = beta_K = 1/2`` and ``gamma = 1/(2 C_K mu_K)``.
    """

    alpha_K: np.ndarray
    alpha_KF: np.ndarray
    beta_K: np.ndarray
    beta_KF: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray


def flux_coefficients(eps_K, mu_K, eps_KF=None, mu_KF=None) -> FluxCoefficients:
    """Evaluate the upwind weights from element media; ``eps_KF=None`` means boundary."""
    eps_K = np.asarray(eps_K, dtype=float)
    mu_K = np.asarray(mu_K, dtype=float)
    if eps_KF is None or mu_KF is None:
        eps_KF, mu_KF = eps_K, mu_K
    eps_KF = np.asarray(eps_KF, dtype=float)
    mu_KF = np.asarray(mu_KF, dtype=float)
    for name, val in (("eps_K", eps_K), ("mu_K", mu_K), ("eps_KF", eps_KF), ("mu_KF", mu_KF)):
        if np.any(~(val > 0)):
            raise ValueError(f"medium coefficient {name} must be positive")
    c_K = 1.0 / np.sqrt(eps_K * mu_K)
    c_F = 1.0 / np.sqrt(eps_KF * mu_KF)
    de = c_F * eps_KF + c_K * eps_K
    dm = c_F * mu_KF + c_K * mu_K
    return FluxCoefficients(
        alpha_K=c_F * eps_KF / de,
        alpha_KF=c_K * eps_K / de,
        beta_K=c_F * mu_KF / dm,
        beta_KF=c_K * mu_K / dm,
        gamma=1.0 / dm,
        delta=1.0 / de,
    )


def mesh_flux_coefficients(mesh: Mesh) -> FluxCoefficients:
    """Per-face weights; exterior faces use the mirrored-ghost convention."""
    own = mesh.face_owner
    nb = np.where(mesh.face_neighbor >= 0, mesh.face_neighbor, own)
    return flux_coefficients(mesh.eps[own], mesh.mu[own], mesh.eps[nb], mesh.mu[nb])


def cross_matrix(n: np.ndarray) -> np.ndarray:
    """Matrices ``N`` with ``N @ x = n x x``; input ``(..., 3)``, output ``(..., 3, 3)``."""
    n = np.asarray(n, dtype=float)
    z = np.zeros(n.shape[:-1])
    return np.stack([
        np.stack([z, -n[..., 2], n[..., 1]], axis=-1),
        np.stack([n[..., 2], z, -n[..., 0]], axis=-1),
        np.stack([-n[..., 1], n[..., 0], z], axis=-1),
    ], axis=-2)


@dataclass(frozen=True, eq=False)
class DiscreteMaxwellOperator:
    """Assembled ``M_h`` as the pair (mass ``A``, bilinear form ``B = B_vol + B_face``)."""

    mesh: Mesh
    mass: MassStructure
    A: sp.csr_matrix
    B_vol: sp.csr_matrix
    B_face: sp.csr_matrix
    flux: FluxCoefficients

    @property
    def B(self) -> sp.csr_matrix:
        return self._B

    def __post_init__(self):
        object.__setattr__(self, "_B", (self.B_vol + self.B_face).tocsr())

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_dofs

    def apply(self, u: Union[DgField, np.ndarray]) -> Union[DgField, np.ndarray]:
        """``M_h u`` (coefficients in, coefficients out; DgField in, DgField out)."""
        if isinstance(u, DgField):
            return DgField(self.mesh, self.apply(u.vector))
        return self.mass.solve(self._B @ u)

    def bilinear(self, u: DgField, v: DgField) -> float:
        """``<M_h u, v>_V``."""
        return float(v.vector @ (self._B @ u.vector))

    def to_dense(self) -> np.ndarray:
        """Dense matrix of ``M_h`` in coefficient space (small meshes only)."""
        return self.mass.solve(self._B.toarray())

    def export_matrix_market(self, directory: str, prefix: str = "") -> tuple:
        """Write ``A`` and ``B`` in Matrix Market coordinate format; returns the two paths."""
        os.makedirs(directory, exist_ok=True)
        pa = os.path.join(directory, f"{prefix}A.mtx")
        pb = os.path.join(directory, f"{prefix}B.mtx")
        scipy.io.mmwrite(pa, self.A, comment="weighted dG mass matrix")
        scipy.io.mmwrite(pb, self._B, comment="upwind dG Maxwell bilinear form B[test, trial]")
        return pa, pb


def _dof(elem, comp, local):
    return (elem * 6 + comp) * 4 + local


def _volume_part(mesh: Mesh) -> sp.csr_matrix:
    ne = mesh.n_elements
    grads = mesh.barycentric_gradients()  # (ne, 4, 3)
    eye = np.eye(3)
    # curl of lambda_i e_c is grad(lambda_i) x e_c ; (ne, i, c, d)
    curls = np.cross(grads[:, :, None, :], eye[None, None, :, :])
    # <curl(lambda_i e_c), lambda_j e_d>_K = curls[..., d] |K| / 4
    val = curls * (mesh.volumes / 4.0)[:, None, None, None]
    K = np.arange(ne)[:, None, None, None, None]
    i = np.arange(4)[None, :, None, None, None]
    c = np.arange(3)[None, None, :, None, None]
    d = np.arange(3)[None, None, None, :, None]
    j = np.arange(4)[None, None, None, None, :]
    vals = np.broadcast_to(val[..., None], (ne, 4, 3, 3, 4))
    # <curl H, psi>: trial H_c (comp 3+c), test psi_d (comp d)
    rows_h = np.broadcast_to(_dof(K, d, j), vals.shape)
    cols_h = np.broadcast_to(_dof(K, 3 + c, i), vals.shape)
    # -<curl E, phi>: trial E_c, test phi_d (comp 3+d)
    rows_e = np.broadcast_to(_dof(K, 3 + d, j), vals.shape)
    cols_e = np.broadcast_to(_dof(K, c, i), vals.shape)
    rows = np.concatenate([rows_h.ravel(), rows_e.ravel()])
    cols = np.concatenate([cols_h.ravel(), cols_e.ravel()])
    data = np.concatenate([vals.ravel(), -vals.ravel()])
    keep = data != 0.0
    n = mesh.n_dofs
    return sp.csr_matrix((data[keep], (rows[keep], cols[keep])), shape=(n, n))


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.data = [], [], []

    def add_face_block(self, area, test_elem, test_nodes, test_off, trial_elem, trial_nodes, trial_off,
                       coef, C):
        """Entries ``coef * C[d, c] * |F| G[a, b]`` for test ``(d, a)`` and trial ``(c, b)``."""
        nf = len(area)
        val = (coef * area)[:, None, None, None, None] * C[:, :, :, None, None] * _FACE_GRAM[None, None, None]
        d = np.arange(3)[None, :, None, None, None]
        c = np.arange(3)[None, None, :, None, None]
        te = test_elem[:, None, None, None, None]
        tr = trial_elem[:, None, None, None, None]
        a_nodes = test_nodes[:, None, None, :, None]
        b_nodes = trial_nodes[:, None, None, None, :]
        shape = (nf, 3, 3, 3, 3)
        self.rows.append(np.broadcast_to(_dof(te, test_off + d, a_nodes), shape).ravel())
        self.cols.append(np.broadcast_to(_dof(tr, trial_off + c, b_nodes), shape).ravel())
        self.data.append(np.broadcast_to(val, shape).ravel())

    def matrix(self, n: int) -> sp.csr_matrix:
        if not self.data:
            return sp.csr_matrix((n, n))
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        data = np.concatenate(self.data)
        keep = data != 0.0
        return sp.csr_matrix((data[keep], (rows[keep], cols[keep])), shape=(n, n))


def _face_part(mesh: Mesh, flux: FluxCoefficients) -> sp.csr_matrix:
    trip = _Triplets()
    N = cross_matrix(mesh.face_normal)
    NtN = np.einsum("fkd,fkc->fdc", N, N)
    own_nodes = mesh.owner_face_nodes()
    nb_nodes = mesh.neighbor_face_nodes()

    inner = mesh.interior
    area = mesh.face_area[inner]
    elems = (mesh.face_owner[inner], mesh.face_neighbor[inner])
    nodes = (own_nodes[inner], nb_nodes[inner])
    sign = (-1.0, 1.0)  # jump = neighbour trace - owner trace
    alpha = (flux.alpha_K[inner], flux.alpha_KF[inner])
    beta = (flux.beta_K[inner], flux.beta_KF[inner])
    gam = flux.gamma[inner]
    dlt = flux.delta[inner]
    Ni, NtNi = N[inner], NtN[inner]
    for s in range(2):  # trial side
        for t in range(2):  # test side
            args = (area, elems[t], nodes[t])
            # + <n x [[H]], beta_K psi_K + beta_KF psi_KF>
            trip.add_face_block(*args, 0, elems[s], nodes[s], 3, sign[s] * beta[t], Ni)
            # - <n x [[E]], alpha_K phi_K + alpha_KF phi_KF>
            trip.add_face_block(*args, 3, elems[s], nodes[s], 0, -sign[s] * alpha[t], Ni)
            # - gamma <n x [[E]], n x [[psi]]>
            trip.add_face_block(*args, 0, elems[s], nodes[s], 0, -gam * sign[s] * sign[t], NtNi)
            # - delta <n x [[H]], n x [[phi]]>
            trip.add_face_block(*args, 3, elems[s], nodes[s], 3, -dlt * sign[s] * sign[t], NtNi)

    outer = mesh.exterior
    if len(outer):
        area = mesh.face_area[outer]
        el = mesh.face_owner[outer]
        nd = own_nodes[outer]
        # + <n x E, phi>
        trip.add_face_block(area, el, nd, 3, el, nd, 0, np.ones(len(outer)), N[outer])
        # - 2 gamma <n x E, n x psi>
        trip.add_face_block(area, el, nd, 0, el, nd, 0, -2.0 * flux.gamma[outer], NtN[outer])
    return trip.matrix(mesh.n_dofs)


def assemble(mesh: Mesh) -> DiscreteMaxwellOperator:
    """Assemble the upwind dG operator on ``mesh``."""
    flux = mesh_flux_coefficients(mesh)
    mass = mass_structure(mesh)
    return DiscreteMaxwellOperator(
        mesh=mesh, mass=mass, A=mass.matrix(), B_vol=_volume_part(mesh),
        B_face=_face_part(mesh, flux), flux=flux,
    )


# ---------------------------------------------------------------------------
# integration-by-parts (mixed) form, usable for analytic fields


def _element_values(u, mesh: Mesh, elems: np.ndarray, bary: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Values ``(len(elems), nq, 6)`` of ``u`` restricted to ``elems`` at points."""
    if isinstance(u, DgField):
        return np.einsum("eci,eqi->eqc", u.coeffs[elems], bary)
    vals = u(pts.reshape(-1, 3))
    return vals.reshape(pts.shape[0], pts.shape[1], 6)


def mixed_load(u: Union[AnalyticField, DgField], mesh: Mesh, flux: Optional[FluxCoefficients] = None,
               degree: int = 8) -> np.ndarray:
    """Vector ``b`` with ``b[i] = <M_h u, phi_i>_V`` evaluated through the mixed form.

    The form moves all derivatives onto the test function, so it applies to
    analytic fields in ``D(M) cap H^1`` as well as to dG fields. On an
    exterior face the volume term leaves ``-<H, n x psi>``.
    """
    if flux is None:
        flux = mesh_flux_coefficients(mesh)
    if isinstance(u, DgField) and u.mesh is not mesh:
        raise ValueError("field lives on a different mesh")
    ne = mesh.n_elements
    b = np.zeros((ne, 6, 4))

    # volume: <H, curl psi> - <E, curl phi>; curls of test functions are constant
    lam, w = tet_rule(degree if not isinstance(u, DgField) else 1)
    grads = mesh.barycentric_gradients()
    xv = mesh.element_vertices()
    pts = np.einsum("qi,eid->eqd", lam, xv)
    bary = np.broadcast_to(lam, (ne,) + lam.shape)
    vals = _element_values(u, mesh, np.arange(ne), bary, pts)
    mean = np.einsum("q,eqc->ec", w, vals) * mesh.volumes[:, None]  # element integrals
    # (grad lam_j x e_d) . X = (X x grad lam_j)_d
    b[:, :3, :] += np.cross(mean[:, None, 3:], grads).transpose(0, 2, 1)
    b[:, 3:, :] -= np.cross(mean[:, None, :3], grads).transpose(0, 2, 1)

    # faces
    tl, tw = triangle_rule(degree if not isinstance(u, DgField) else 2)
    own_nodes = mesh.owner_face_nodes()
    nb_nodes = mesh.neighbor_face_nodes()
    fpts = np.einsum("qa,fad->fqd", tl, mesh.vertices[mesh.faces])
    n = mesh.face_normal

    def trace(side_elems, side_nodes, sel):
        # element barycentrics of the face quadrature points
        bq = np.zeros((len(sel), len(tw), 4))
        rows = np.arange(len(sel))[:, None]
        cols = np.arange(len(tw))[None, :]
        for a in range(3):
            bq[rows, cols, side_nodes[sel][:, a:a + 1]] = tl[None, :, a]
        return _element_values(u, mesh, side_elems[sel], bq, fpts[sel])

    def moments(X, sel):
        # int_F X lambda_a  -> (nsel, 3 nodes, 3 comps)
        return np.einsum("q,fqc,qa->fac", tw, X, tl) * mesh.face_area[sel][:, None, None]

    def scatter(sel, elems, nodes, comp_off, sgn, Y):
        # test function sgn * lambda_a e_d ; contribution sgn * (Y_a)_d
        for a in range(3):
            np.add.at(b, (elems[sel][:, None], comp_off + np.arange(3)[None, :], nodes[sel][:, a:a + 1]),
                      sgn * Y[:, a, :])

    inner = mesh.interior
    if len(inner):
        uk = trace(mesh.face_owner, own_nodes, inner)
        uf = trace(mesh.face_neighbor, nb_nodes, inner)
        nq = n[inner][:, None, :]
        jE = uf[..., :3] - uk[..., :3]
        jH = uf[..., 3:] - uk[..., 3:]
        bK, bF = flux.beta_K[inner][:, None, None], flux.beta_KF[inner][:, None, None]
        aK, aF = flux.alpha_K[inner][:, None, None], flux.alpha_KF[inner][:, None, None]
        g = flux.gamma[inner][:, None, None]
        dl = flux.delta[inner][:, None, None]
        Xpsi = bK * uf[..., 3:] + bF * uk[..., 3:] - g * np.cross(nq, jE)
        Xphi = -(aK * uf[..., :3] + aF * uk[..., :3] + dl * np.cross(nq, jH))
        # <X, n x [[w]]> with [[w]] = s lambda_a e_d  ->  s (X_a x n)_d
        Ypsi = np.cross(moments(Xpsi, inner), n[inner][:, None, :])
        Yphi = np.cross(moments(Xphi, inner), n[inner][:, None, :])
        for elems, nodes, sgn in ((mesh.face_owner, own_nodes, -1.0), (mesh.face_neighbor, nb_nodes, 1.0)):
            scatter(inner, elems, nodes, 0, sgn, Ypsi)
            scatter(inner, elems, nodes, 3, sgn, Yphi)

    outer = mesh.exterior
    if len(outer):
        uk = trace(mesh.face_owner, own_nodes, outer)
        nq = n[outer][:, None, :]
        g = flux.gamma[outer][:, None, None]
        Xpsi = -uk[..., 3:] - 2.0 * g * np.cross(nq, uk[..., :3])
        Ypsi = np.cross(moments(Xpsi, outer), n[outer][:, None, :])
        scatter(outer, mesh.face_owner, own_nodes, 0, 1.0, Ypsi)
    return b.reshape(-1)


def mixed_form(u: Union[AnalyticField, DgField], v: DgField, flux: Optional[FluxCoefficients] = None,
               degree: int = 8) -> float:
    """``<M_h u, v_h>_V`` through the integration-by-parts form."""
    return float(mixed_load(u, v.mesh, flux, degree) @ v.vector)


def dissipation_face_sum(u: DgField, flux: Optional[FluxCoefficients] = None) -> float:
    """``sum_int gamma|n x [[E]]|^2 + delta|n x [[H]]|^2 + 2 sum_ext gamma|n x E|^2`` (nonnegative)."""
    mesh = u.mesh
    if flux is None:
        flux = mesh_flux_coefficients(mesh)
    own_nodes = mesh.owner_face_nodes()
    nb_nodes = mesh.neighbor_face_nodes()

    def nodal(elems, nodes):
        return np.take_along_axis(u.coeffs[elems], nodes[:, None, :], axis=2).transpose(0, 2, 1)

    def sq_norm(W, normals, area):
        nx = np.cross(normals[:, None, :], W)
        return np.einsum("fad,ab,fbd->f", nx, _FACE_GRAM, nx) * area

    total = 0.0
    inner = mesh.interior
    if len(inner):
        jump = nodal(mesh.face_neighbor[inner], nb_nodes[inner]) - nodal(mesh.face_owner[inner], own_nodes[inner])
        nr, ar = mesh.face_normal[inner], mesh.face_area[inner]
        total += float(np.sum(flux.gamma[inner] * sq_norm(jump[..., :3], nr, ar)
                              + flux.delta[inner] * sq_norm(jump[..., 3:], nr, ar)))
    outer = mesh.exterior
    if len(outer):
        tr = nodal(mesh.face_owner[outer], own_nodes[outer])
        total += float(np.sum(2.0 * flux.gamma[outer]
                              * sq_norm(tr[..., :3], mesh.face_normal[outer], mesh.face_area[outer])))
    return total
