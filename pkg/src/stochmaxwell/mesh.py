"""Structured Kuhn tetrahedral meshes of a cuboid with fixed face orientation."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Cuboid",
    "MediumSpec",
    "Mesh",
    "MeshError",
    "build_structured_mesh",
    "classify_faces",
]

# local face i of a tetrahedron is the face opposite to local vertex i
LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])

# Kuhn split: one tetrahedron per axis permutation, all sharing the main diagonal
_KUHN_PERMS = list(permutations(range(3)))


class MeshError(ValueError):
    """Raised for invalid mesh input or an inconsistent face topology."""


@dataclass(frozen=True)
class Cuboid:
    """Axis-aligned box ``(lower[0], upper[0]) x ... x (lower[2], upper[2])``."""

    lower: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    upper: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != 3 or len(hi) != 3:
            raise MeshError("cuboid needs three extents")
        if not all(np.isfinite(lo + hi)):
            raise MeshError("cuboid extents must be finite")
        if any(b <= a for a, b in zip(lo, hi)):
            raise MeshError(f"degenerate cuboid extents {lo} -> {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def lengths(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @classmethod
    def pi_cube(cls) -> "Cuboid":
        return cls((0.0, 0.0, 0.0), (np.pi, np.pi, np.pi))


@dataclass(frozen=True)
class MediumSpec:
    """Piecewise-constant permittivity and permeability.

    ``eps`` and ``mu`` are scalars for a homogeneous medium, or arrays of shape
    ``(len(breaks[0]) + 1, len(breaks[1]) + 1, len(breaks[2]) + 1)`` giving the
    values on each axis-aligned block. ``breaks`` holds the interior block
    boundaries per axis, which must coincide with grid planes of the mesh.
    """

    eps: object = 1.0
    mu: object = 1.0
    breaks: Optional[Tuple[Sequence[float], Sequence[float], Sequence[float]]] = None
    delta: float = 1e-12

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if self.breaks is None:
            if eps.ndim != 0 or mu.ndim != 0:
                raise MeshError("array-valued medium needs block breaks")
        else:
            if len(self.breaks) != 3:
                raise MeshError("breaks must list three axes")
            shape = tuple(len(b) + 1 for b in self.breaks)
            eps = np.broadcast_to(eps, shape)
            mu = np.broadcast_to(mu, shape)
            for b in self.breaks:
                if np.any(np.diff(b) <= 0):
                    raise MeshError("block breaks must be strictly increasing")
        if self.delta <= 0:
            raise MeshError("medium lower bound delta must be positive")
        if not (np.all(np.isfinite(eps)) and np.all(np.isfinite(mu))):
            raise MeshError("medium coefficients must be finite")
        if eps.min() < self.delta or mu.min() < self.delta:
            raise MeshError(
                f"medium coefficients must satisfy eps, mu >= delta = {self.delta}"
            )

    @property
    def is_constant(self) -> bool:
        if self.breaks is None:
            return True
        eps = np.asarray(self.eps, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        return bool(np.ptp(eps) == 0 and np.ptp(mu) == 0)

    def evaluate(self, centroids: np.ndarray, domain: Cuboid, grid_n) -> Tuple[np.ndarray, np.ndarray]:
        """Return per-element ``(eps, mu)`` for element centroids."""
        ne = len(centroids)
        if self.breaks is None:
            return (np.full(ne, float(self.eps)), np.full(ne, float(self.mu)))
        eps = np.broadcast_to(np.asarray(self.eps, float), tuple(len(b) + 1 for b in self.breaks))
        mu = np.broadcast_to(np.asarray(self.mu, float), eps.shape)
        idx = []
        for axis in range(3):
            b = np.asarray(self.breaks[axis], dtype=float)
            lo, hi = domain.lower[axis], domain.upper[axis]
            if np.any(b <= lo) or np.any(b >= hi):
                raise MeshError(f"block break outside the domain on axis {axis}")
            step = (hi - lo) / grid_n[axis]
            k = (b - lo) / step
            if np.any(np.abs(k - np.round(k)) > 1e-10):
                raise MeshError(
                    f"medium block boundaries on axis {axis} are not aligned with grid planes"
                )
            idx.append(np.searchsorted(b, centroids[:, axis]))
        return eps[idx[0], idx[1], idx[2]].copy(), mu[idx[0], idx[1], idx[2]].copy()


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable tetrahedral mesh with oriented faces.

    Faces are stored once. ``face_owner`` is the element ``K`` and
    ``face_neighbor`` the element ``K_F`` (``-1`` on the boundary). The normal
    ``face_normal`` points from ``K`` into ``K_F`` for interior faces and
    outward for exterior faces. The owner of an interior face is always the
    element with the smaller index.
    """

    domain: Cuboid
    grid_n: Tuple[int, int, int]
    vertices: np.ndarray
    elements: np.ndarray
    volumes: np.ndarray
    faces: np.ndarray
    face_area: np.ndarray
    face_normal: np.ndarray
    face_owner: np.ndarray
    face_neighbor: np.ndarray
    face_owner_local: np.ndarray
    face_neighbor_local: np.ndarray
    face_boundary: np.ndarray
    element_faces: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    h: float
    medium: MediumSpec = field(default_factory=MediumSpec)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_dofs(self) -> int:
        return 24 * self.n_elements

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.face_neighbor >= 0)

    @property
    def exterior(self) -> np.ndarray:
        return np.flatnonzero(self.face_neighbor < 0)

    @property
    def constant_medium(self) -> bool:
        return bool(np.ptp(self.eps) == 0 and np.ptp(self.mu) == 0)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    def element_vertices(self) -> np.ndarray:
        """Vertex coordinates, shape ``(n_elements, 4, 3)``."""
        return self.vertices[self.elements]

    def barycentric_gradients(self) -> np.ndarray:
        """Gradients of the four barycentric coordinates, shape ``(ne, 4, 3)``."""
        x = self.element_vertices()
        jac = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)  # columns are edges
        inv = np.linalg.inv(jac)  # rows give grad of lambda_1..3
        grads = np.empty((len(x), 4, 3))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        return grads

    def owner_face_nodes(self) -> np.ndarray:
        """Local indices in the owner of the three face vertices, ``(nf, 3)``."""
        return _local_positions(self.elements[self.face_owner], self.faces)

    def neighbor_face_nodes(self) -> np.ndarray:
        """Local indices in the neighbour of the face vertices (``-1`` rows on the boundary)."""
        out = np.full((self.n_faces, 3), -1, dtype=np.int64)
        inner = self.interior
        out[inner] = _local_positions(self.elements[self.face_neighbor[inner]], self.faces[inner])
        return out


def _local_positions(elem_vertices: np.ndarray, face_vertices: np.ndarray) -> np.ndarray:
    match = elem_vertices[:, None, :] == face_vertices[:, :, None]
    if not np.all(match.sum(axis=2) == 1):
        raise MeshError("face vertices not found in adjacent element")
    return match.argmax(axis=2)


def build_structured_mesh(domain: Cuboid, n, medium: Optional[MediumSpec] = None) -> Mesh:
    """Kuhn split of a uniform ``n[0] x n[1] x n[2]`` grid of ``domain`` into tetrahedra."""
    if medium is None:
        medium = MediumSpec()
    if np.isscalar(n):
        n = (int(n),) * 3
    n = tuple(int(v) for v in n)
    if len(n) != 3 or min(n) < 1:
        raise MeshError(f"subdivisions must be >= 1 per axis, got {n}")

    lo = np.asarray(domain.lower)
    step = domain.lengths / np.asarray(n)
    axes = [lo[a] + step[a] * np.arange(n[a] + 1) for a in range(3)]
    axes = [np.concatenate([ax[:-1], [domain.upper[a]]]) for a, ax in enumerate(axes)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1)

    def vid(i, j, k):
        return i + (n[0] + 1) * (j + (n[1] + 1) * k)

    ii, jj, kk = np.meshgrid(*(np.arange(m) for m in n), indexing="ij")
    ii, jj, kk = (a.ravel(order="F") for a in (ii, jj, kk))
    tets = []
    for perm in _KUHN_PERMS:
        cur = np.stack([ii, jj, kk], axis=1)
        path = [vid(*cur.T)]
        for axis in perm:
            cur = cur.copy()
            cur[:, axis] += 1
            path.append(vid(*cur.T))
        tets.append(np.stack(path, axis=1))
    # cube-major ordering: the six tetrahedra of a cube are consecutive
    elements = np.stack(tets, axis=1).reshape(-1, 4)

    x = vertices[elements]
    signed = np.einsum("ij,ij->i", np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), x[:, 3] - x[:, 0]) / 6.0
    flip = signed < 0
    elements[flip] = elements[flip][:, [0, 1, 3, 2]]
    volumes = np.abs(signed)
    if np.any(volumes <= 0):
        raise MeshError("degenerate tetrahedron")

    # face enumeration
    ne = len(elements)
    all_faces = elements[:, LOCAL_FACES].reshape(-1, 3)
    keys = np.sort(all_faces, axis=1)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        raise MeshError("face shared by more than two elements")
    slot_elem = np.repeat(np.arange(ne), 4)
    slot_local = np.tile(np.arange(4), ne)
    order = np.lexsort((slot_elem, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    nf = len(uniq)
    owner = np.empty(nf, dtype=np.int64)
    owner_local = np.empty(nf, dtype=np.int64)
    owner[inverse[order][first]] = slot_elem[order][first]
    owner_local[inverse[order][first]] = slot_local[order][first]
    neighbor = np.full(nf, -1, dtype=np.int64)
    neighbor_local = np.full(nf, -1, dtype=np.int64)
    second = ~first
    neighbor[inverse[order][second]] = slot_elem[order][second]
    neighbor_local[inverse[order][second]] = slot_local[order][second]

    # keep face vertex order as it appears in the owner
    faces = elements[owner][np.arange(nf)[:, None], LOCAL_FACES[owner_local]]
    p = vertices[faces]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    area = 0.5 * np.linalg.norm(cr, axis=1)
    normal = cr / np.linalg.norm(cr, axis=1)[:, None]
    opposite = vertices[elements[owner, owner_local]]
    outward = np.einsum("ij,ij->i", normal, p[:, 0] - opposite)
    normal[outward < 0] *= -1.0

    element_faces = np.empty((ne, 4), dtype=np.int64)
    element_faces[slot_elem, slot_local] = inverse

    boundary = np.full(nf, -1, dtype=np.int64)
    ext = neighbor < 0
    for axis in range(3):
        for side, value in enumerate((domain.lower[axis], domain.upper[axis])):
            on = ext & np.all(np.abs(p[:, :, axis] - value) <= 1e-12 * max(1.0, abs(value)), axis=1)
            boundary[on] = 2 * axis + side

    centroids = x.mean(axis=1)
    eps, mu = medium.evaluate(centroids, domain, n)
    h = float(np.linalg.norm(step))

    arrays = dict(
        vertices=vertices, elements=elements, volumes=volumes, faces=faces,
        face_area=area, face_normal=normal, face_owner=owner, face_neighbor=neighbor,
        face_owner_local=owner_local, face_neighbor_local=neighbor_local,
        face_boundary=boundary, element_faces=element_faces, eps=eps, mu=mu,
    )
    for a in arrays.values():
        a.setflags(write=False)
    mesh = Mesh(domain=domain, grid_n=n, h=h, medium=medium, **arrays)
    _check_topology(mesh)
    return mesh


def classify_faces(mesh: Mesh) -> Tuple[np.ndarray, np.ndarray]:
    """Split the face set into ``(interior, exterior)`` index arrays.

    Raises :class:`MeshError` if an exterior face is off the boundary or the
    element/face adjacency is inconsistent.
    """
    _check_topology(mesh)
    return mesh.interior, mesh.exterior


def _check_topology(mesh: Mesh) -> None:
    nf = mesh.n_faces
    refs = np.bincount(mesh.element_faces.ravel(), minlength=nf)
    interior = mesh.face_neighbor >= 0
    if np.any(refs[interior] != 2) or np.any(refs[~interior] != 1):
        raise MeshError("face adjacency inconsistency")
    if 4 * mesh.n_elements != 2 * interior.sum() + (~interior).sum():
        raise MeshError("face count violates 4*#elements = 2*#interior + #exterior")
    if np.any(mesh.face_boundary[~interior] < 0):
        raise MeshError("exterior face not on the domain boundary")
    if np.any(mesh.face_boundary[interior] >= 0):
        raise MeshError("interior face classified as boundary")
    if np.any(mesh.face_owner[interior] >= mesh.face_neighbor[interior]):
        raise MeshError("interior face owner must be the smaller element index")
    own = np.sort(mesh.elements[mesh.face_owner][np.arange(nf)[:, None], LOCAL_FACES[mesh.face_owner_local]], axis=1)
    if not np.array_equal(own, np.sort(mesh.faces, axis=1)):
        raise MeshError("face vertices disagree with owner element")
    inner = np.flatnonzero(interior)
    nb = np.sort(
        mesh.elements[mesh.face_neighbor[inner]][np.arange(len(inner))[:, None], LOCAL_FACES[mesh.face_neighbor_local[inner]]],
        axis=1,
    )
    if not np.array_equal(nb, own[inner]):
        raise MeshError("interior face vertices disagree between owner and neighbour")
