import functools

import numpy as np
import pytest
from hypothesis import settings

from stochmaxwell.maxwell_operator import assemble
from stochmaxwell.mesh import Cuboid, MediumSpec, build_structured_mesh

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def cube_mesh(n, pi=False):
    return build_structured_mesh(Cuboid.pi_cube() if pi else Cuboid(), n)


@functools.lru_cache(maxsize=None)
def cube_operator(n, pi=False):
    return assemble(cube_mesh(n, pi))


def two_block_medium():
    """eps = 1 | 3 and mu = 2 | 1 across the plane x1 = 1/2."""
    return MediumSpec(eps=np.array([1.0, 3.0]).reshape(2, 1, 1), mu=np.array([2.0, 1.0]).reshape(2, 1, 1),
                      breaks=([0.5], [], []))


@functools.lru_cache(maxsize=None)
def layered_mesh(n):
    return build_structured_mesh(Cuboid(), n, two_block_medium())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
