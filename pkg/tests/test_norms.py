import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughmaps import data, norms
from roughmaps.halfspace import Field, HalfSpaceGrid, constant_field, poisson_extend


@pytest.fixture(scope="module")
def grid():
    return HalfSpaceGrid(n=17)


@pytest.fixture(scope="module")
def ext(grid):
    return poisson_extend(grid, data.step_geodesic(grid, 1.0))


def test_constant_field_has_sup_only(grid):
    rep = norms.x_norm(constant_field(grid, [0.0, 0.6, 0.8]))
    assert rep.sup_norm == pytest.approx(1.0)
    assert rep.weighted_grad_sup < 1e-12 and rep.carleson_energy < 1e-12
    assert rep.total == pytest.approx(rep.sup_norm, abs=1e-12)


@settings(max_examples=8, deadline=None)
@given(st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3))
def test_x_norm_homogeneous(s):
    g = HalfSpaceGrid(n=17)
    u = poisson_extend(g, data.geodesic_cap(g, 0.4))
    a, b = norms.x_norm(u), norms.x_norm(u * s)
    for k in ("sup_norm", "weighted_grad_sup", "carleson_energy"):
        assert getattr(b, k) == pytest.approx(abs(s) * getattr(a, k), rel=1e-12)


def test_carleson_matches_exhaustive(ext):
    assert norms.x_norm(ext).carleson_energy == pytest.approx(norms.carleson_exhaustive(ext), rel=1e-13)


def test_carleson_density_refinement_is_close(ext):
    a = norms.x_norm(ext).carleson_energy
    b = norms.x_norm(ext, density=4).carleson_energy
    assert b >= a * (1 - 1e-12) and b <= 1.1 * a


def test_carleson_sup_reports_argmax(ext):
    rep = norms.x_norm(ext)
    assert rep.argmax["carleson"]["radius"] > 0
    assert len(rep.argmax["sup"]) == 3


def test_y_norm_zero_and_homogeneous(grid):
    F = Field(grid, np.zeros(grid.shape + (3,)))
    assert norms.y_norm(F) == 0.0
    rng = np.random.default_rng(0)
    F = Field(grid, rng.random(grid.shape + (3,)))
    assert norms.y_norm(F * 3) == pytest.approx(3 * norms.y_norm(F), rel=1e-12)
    d = norms.y_norm(F, detail=True)
    assert d["total"] == pytest.approx(d["sup_term"] + d["carleson_term"])


def test_bmo_of_constant_is_zero(grid):
    assert norms.bmo_norm(data.constant(grid)) == 0.0


def test_bmo_step_value():
    g = HalfSpaceGrid(n=33)
    f = data.step_geodesic(g, angle=1.0)
    jump = 2 * np.sin(0.5)
    assert norms.bmo_norm(f) == pytest.approx(jump / 2, rel=0.02)


def test_bmo_translation_invariant():
    g = HalfSpaceGrid(n=33)
    f = data.geodesic_cap(g, 0.5, radius=0.75)
    assert norms.bmo_norm(f.shifted((2, -3))) == pytest.approx(norms.bmo_norm(f), rel=1e-12)


def test_bmo_sampled_below_oracle_on_step():
    g = HalfSpaceGrid(n=17)
    f = data.step_geodesic(g, angle=1.0)
    s, o = norms.bmo_norm(f), norms.bmo_oracle(f)
    assert s <= o * (1 + 1e-12)
    assert s == pytest.approx(o, rel=0.02)


def test_bmo_radii_geometric():
    g = HalfSpaceGrid(n=33)
    r = norms.bmo_radii(g)
    np.testing.assert_allclose(r[1:] / r[:-1], np.sqrt(2))
    assert r[0] == g.h and r[-1] <= g.L * (1 + 1e-12)
