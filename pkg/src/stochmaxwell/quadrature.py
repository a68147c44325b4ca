"""Collapsed-coordinate Gauss-Jacobi rules on the reference simplex.

Rules are returned in barycentric form so that they map onto any physical
simplex by an affine combination of its vertices.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.special import roots_jacobi

__all__ = ["tet_rule", "triangle_rule", "EDGE_MIDPOINT_RULE"]


def _jacobi01(m: int, alpha: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for int_0^1 (1 - a)^alpha f(a) da."""
    t, w = roots_jacobi(m, alpha, 0)
    return (1.0 + t) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def tet_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Barycentric points ``(nq, 4)`` and weights summing to 1 (unit-volume normalised).

    Exact for polynomials of total degree ``<= degree``.
    """
    m = max(1, (degree + 2) // 2)
    a, wa = _jacobi01(m, 2)
    b, wb = _jacobi01(m, 1)
    c, wc = _jacobi01(m, 0)
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = (wa[:, None, None] * wb[None, :, None] * wc[None, None, :]).ravel() * 6.0
    x = A.ravel()
    y = ((1 - A) * B).ravel()
    z = ((1 - A) * (1 - B) * C).ravel()
    lam = np.stack([1 - x - y - z, x, y, z], axis=1)
    lam.setflags(write=False)
    W.setflags(write=False)
    return lam, W


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Barycentric points ``(nq, 3)`` and weights summing to 1."""
    m = max(1, (degree + 2) // 2)
    a, wa = _jacobi01(m, 1)
    b, wb = _jacobi01(m, 0)
    A, B = np.meshgrid(a, b, indexing="ij")
    W = (wa[:, None] * wb[None, :]).ravel() * 2.0
    x = A.ravel()
    y = ((1 - A) * B).ravel()
    lam = np.stack([1 - x - y, x, y], axis=1)
    lam.setflags(write=False)
    W.setflags(write=False)
    return lam, W


# exact for quadratics on a triangle
EDGE_MIDPOINT_RULE = (
    np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    np.full(3, 1.0 / 3.0),
)
