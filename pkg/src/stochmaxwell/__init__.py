"""Discontinuous Galerkin midpoint schemes for Maxwell's equations with additive noise.

Modules
-------
mesh                structured tetrahedral meshes of cuboids with piecewise-constant media
dg_space            discontinuous P1 fields, weighted mass structure, projections and norms
maxwell_operator    upwind-flux dG Maxwell operator (sparse assembly)
noise               Q-Wiener increments with bridge refinement
spectral            cavity modes and exact / midpoint flows in modal coordinates
timestepper         implicit midpoint time stepping of the dG system
divergence          weak divergence residuals against an edge-enriched test space
ldp                 Gaussian large-deviation rate functionals
experiments, cli    reproducible studies and the command-line driver
"""

__version__ = "0.1.0"
