"""Legacy ASCII VTK output for discontinuous P1 fields.

Every element gets its own four points, so the piecewise-linear field is
represented exactly (no averaging across faces).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .dg_space import DgField
from .mesh import Mesh

__all__ = ["write_vtk"]

_VTK_TETRA = 10


def write_vtk(path: str, mesh: Mesh, field: Optional[DgField] = None, title: str = "dG field") -> None:
    """Write an unstructured grid with corner-sampled ``E``, ``H`` and cellwise ``eps``, ``mu``."""
    ne = mesh.n_elements
    pts = mesh.vertices[mesh.elements].reshape(-1, 3)
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {4 * ne} double"]
    lines.extend(" ".join(repr(float(v)) for v in p) for p in pts)
    lines.append(f"CELLS {ne} {5 * ne}")
    ids = np.arange(4 * ne).reshape(ne, 4)
    lines.extend(f"4 {a} {b} {c} {d}" for a, b, c, d in ids)
    lines.append(f"CELL_TYPES {ne}")
    lines.extend([str(_VTK_TETRA)] * ne)
    lines.append(f"CELL_DATA {ne}")
    for name, arr in (("eps", mesh.eps), ("mu", mesh.mu)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines.extend(repr(float(v)) for v in arr)
    if field is not None:
        lines.append(f"POINT_DATA {4 * ne}")
        # coefficients are nodal values at the element corners: (ne, 6, 4) -> (ne*4, 6)
        corner = field.coeffs.transpose(0, 2, 1).reshape(-1, 6)
        for name, sl in (("E", slice(0, 3)), ("H", slice(3, 6))):
            lines.append(f"VECTORS {name} double")
            lines.extend(" ".join(repr(float(v)) for v in row) for row in corner[:, sl])
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
