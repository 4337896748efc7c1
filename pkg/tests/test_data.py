import numpy as np
import pytest

from roughmaps import data
from roughmaps.halfspace import HalfSpaceGrid
from roughmaps.norms import bmo_norm


@pytest.fixture(scope="module")
def grid():
    return HalfSpaceGrid(n=33)


@pytest.mark.parametrize(
    "name,params",
    [("constant", {}), ("geodesic_cap", {"amplitude": 0.3}), ("step_geodesic", {"angle": 1.0}), ("log_spiral", {"lam": 0.5})],
)
def test_generators_are_sphere_valued_with_window_support(grid, sphere, name, params):
    f = data.generate_boundary_data(name, params, grid)
    f.validate(sphere, tol=1e-14)
    assert f.support_ok()


def test_constant_is_base_point(grid):
    f = data.constant(grid)
    np.testing.assert_array_equal(f.f, np.broadcast_to(grid.p, f.f.shape))


@pytest.mark.parametrize("alpha", [0.05, 0.3, 1.0])
def test_cap_chord_length(grid, alpha):
    f = data.geodesic_cap(grid, alpha)
    dev = np.linalg.norm(f.f - f.p, axis=-1).max()
    assert dev == pytest.approx(2 * np.sin(alpha / 2), rel=1e-12)


def test_cap_amplitude_range(grid):
    with pytest.raises(data.AmplitudeOutOfRange):
        data.geodesic_cap(grid, np.pi)
    with pytest.raises(ValueError):
        data.geodesic_cap(grid, 0.1, radius=grid.L)


def test_unknown_generator(grid):
    with pytest.raises(data.UnknownGenerator):
        data.generate_boundary_data("spiral", {}, grid)


def test_step_takes_two_values(grid):
    f = data.step_geodesic(grid, angle=0.7)
    vals = np.unique(np.round(f.f.reshape(-1, 3), 14), axis=0)
    assert len(vals) == 2


def test_log_spiral_bmo_linear_sup_saturates():
    g = HalfSpaceGrid(n=33)
    lams = [0.05, 0.1, 0.2]
    b = [bmo_norm(data.log_spiral(g, lam)) for lam in lams]
    np.testing.assert_allclose(np.array(b[1:]) / np.array(b[:-1]), 2.0, rtol=0.02)
    big = data.log_spiral(g, 20.0)
    assert np.linalg.norm(big.f - big.p, axis=-1).max() <= 2.0 + 1e-12
    assert np.linalg.norm(big.f - big.p, axis=-1).max() > 1.9


def test_smooth_bump():
    assert data.smooth_bump(np.array(0.0), 1.0) == 1.0
    assert data.smooth_bump(np.array(1.0), 1.0) == 0.0
