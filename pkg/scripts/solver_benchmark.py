"""Time one midpoint solve per mesh level for the direct and GMRES back ends.

Usage: python scripts/solver_benchmark.py [levels ...]
"""

import sys
import time

import numpy as np

from stochmaxwell.maxwell_operator import assemble
from stochmaxwell.mesh import Cuboid, build_structured_mesh
from stochmaxwell.timestepper import DIRECT_SIZE_LIMIT, MidpointSolver


def main(levels):
    rng = np.random.default_rng(0)
    print(f"{'n':>3} {'N_h':>8} {'method':>7} {'setup [s]':>10} {'solve [s]':>10} {'residual':>10}")
    for n in levels:
        op = assemble(build_structured_mesh(Cuboid.pi_cube(), n))
        b = rng.standard_normal(op.n_dofs)
        for method in ("direct", "gmres"):
            if method == "direct" and op.n_dofs > 2 * DIRECT_SIZE_LIMIT:
                continue
            t = time.perf_counter()
            sol = MidpointSolver(op, 0.05, method=method)
            setup = time.perf_counter() - t
            t = time.perf_counter()
            x = sol.solve(b)
            solve = time.perf_counter() - t
            res = np.linalg.norm(sol.lhs @ x - b) / np.linalg.norm(b)
            print(f"{n:>3} {op.n_dofs:>8} {method:>7} {setup:>10.3f} {solve:>10.3f} {res:>10.2e}")


if __name__ == "__main__":
    main([int(a) for a in sys.argv[1:]] or [2, 4, 8])
