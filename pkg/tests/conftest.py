import numpy as np
import pytest

from roughmaps.geometry import TargetManifold
from roughmaps.halfspace import HalfSpaceGrid


@pytest.fixture
def sphere():
    return TargetManifold.sphere()


@pytest.fixture
def implicit_sphere():
    return TargetManifold.implicit(lambda z: np.sum(z * z, axis=-1) - 1.0, lambda z: 2.0 * z)


@pytest.fixture
def ellipsoid():
    return TargetManifold.implicit(
        lambda z: z[..., 0] ** 2 + z[..., 1] ** 2 + 4 * z[..., 2] ** 2 - 1.0,
        lambda z: np.stack([2 * z[..., 0], 2 * z[..., 1], 8 * z[..., 2]], axis=-1),
    )


@pytest.fixture
def small_grid():
    return HalfSpaceGrid(n=17)


@pytest.fixture
def mid_grid():
    return HalfSpaceGrid(n=33)
