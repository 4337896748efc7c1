import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughmaps import box
from roughmaps.box import BoxField, BoxGrid, StableBase


def sine_mode(grid, e=(1.0, 0.0, 0.0)):
    """prod sin(pi x_i) e: the first Dirichlet eigenfunction times a fixed vector."""
    X = grid.node_coords()
    s = np.prod(np.sin(np.pi * X), axis=-1)
    s[grid.boundary_mask] = 0.0
    return BoxField(grid, s[..., None] * np.asarray(e, float))


def random_zero_trace(grid, rng, m=3):
    a = rng.standard_normal(grid.shape + (m,))
    a[grid.boundary_mask] = 0.0
    return BoxField(grid, a)


@pytest.fixture(scope="module")
def g17():
    return BoxGrid(3, 17)


@pytest.fixture(scope="module")
def geo17(g17):
    return StableBase.geodesic(g17, 2.0)


# -- grid and linear algebra -----------------------------------------------


@pytest.mark.parametrize("d", [2, 3])
def test_grid_distance_and_boundary(d):
    g = BoxGrid(d, 9)
    assert g.dist.max() == pytest.approx(0.5)
    assert g.boundary_mask.sum() == 9**d - 7**d
    assert np.all(g.dist[g.boundary_mask] == 0) and np.all(g.dist[~g.boundary_mask] > 0)


def test_grid_validation():
    with pytest.raises(ValueError):
        BoxGrid(4, 9)
    with pytest.raises(ValueError):
        BoxGrid(3, 2)
    with pytest.raises(ValueError):
        BoxField(BoxGrid(2, 5), np.zeros((4, 5, 3)))


@pytest.mark.parametrize("d", [2, 3])
def test_dst_solve_matches_sparse(d):
    g = BoxGrid(d, 13)
    rng = np.random.default_rng(0)
    F = rng.standard_normal(g.shape + (2,))
    bv = rng.standard_normal(g.shape + (2,))
    u = box.poisson_solve(g, F, bv)
    assert np.array_equal(u[g.boundary_mask], bv[g.boundary_mask])
    lap = box.laplacian(g, u)
    assert np.abs(g.inner(-lap - F)).max() < 1e-9


def test_first_eigenvalue_matches_sine_mode():
    g = BoxGrid(3, 17)
    phi = sine_mode(g).values
    lap = box.laplacian(g, phi)
    lam = box.first_eigenvalue(g)
    assert np.abs(g.inner(lap + lam * phi)).max() < 1e-10
    assert lam == pytest.approx(3 * np.pi**2, rel=0.01)


# -- W and Z norms ------------------------------------------------------------


def test_w_norm_constant_is_sup_only(g17):
    rep = box.w_norm(BoxField(g17, np.broadcast_to([0.0, 0.6, 0.8], g17.shape + (3,))))
    assert rep.sup_norm == pytest.approx(1.0)
    assert rep.weighted_grad_sup == 0 and rep.carleson_energy == 0


@settings(max_examples=6, deadline=None)
@given(st.floats(-4, 4).filter(lambda s: abs(s) > 1e-3))
def test_w_norm_homogeneous(s):
    g = BoxGrid(3, 9)
    u = BoxField(g, np.random.default_rng(3).standard_normal(g.shape + (3,)))
    a, b = box.w_norm(u), box.w_norm(u * s)
    for k in ("sup_norm", "weighted_grad_sup", "carleson_energy"):
        assert getattr(b, k) == pytest.approx(abs(s) * getattr(a, k), rel=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_carleson_box_matches_exhaustive(d):
    g = BoxGrid(d, 9)
    q = np.random.default_rng(d).random(g.shape)
    fast, _ = box.carleson_box(g, q)
    assert fast == pytest.approx(box.carleson_box_exhaustive(g, q), rel=1e-12)


def test_z_norm_zero_and_single_node(g17):
    assert box.z_norm(box.zero_field(g17)) == 0.0
    F = np.zeros(g17.shape + (3,))
    F[8, 8, 8, 2] = 2.0
    d = g17.dist[8, 8, 8]
    det = box.z_norm(BoxField(g17, F), detail=True)
    assert det["sup_term"] == pytest.approx(d**2 * 2.0)
    # the smallest region reaching the centre of the cube from a face has radius > 0.5
    r = box.carleson_radii(g17)
    r = r[r + g17.h / 2 > 0.5][0]
    assert det["carleson_term"] == pytest.approx(r ** (1 - 3) * d * 2.0 * g17.cell_volume)


def test_z_of_energy_density_bounded_by_w_squared(g17):
    rng = np.random.default_rng(0)
    f, F = box.smooth_random_data(g17, rng)
    u = box.harmonic_extension(g17, f) + box.newton_potential(g17, F)
    g2 = np.sum(box.gradient(g17, u.values) ** 2, axis=(-2, -1))
    g2[g17.boundary_mask] = 0.0
    assert box.z_norm(BoxField(g17, g2)) <= box.w_norm(u).seminorm ** 2 * (1 + 1e-12)


# -- stability form ---------------------------------------------------------


def test_constant_base_rayleigh_quotient_is_lambda1(g17):
    base = StableBase.constant(g17)
    phi = sine_mode(g17, (1.0, 0.0, 0.0))
    Q = box.stability_form(base, phi)
    mass = float(np.sum(phi.values**2)) * g17.cell_volume
    assert Q / mass == pytest.approx(box.first_eigenvalue(g17), rel=1e-12)
    assert box.stability_form(base, phi * 2.0) == pytest.approx(4 * Q, rel=1e-12)
    # the normal component is projected out
    assert box.stability_form(base, sine_mode(g17, (0.0, 0.0, 1.0))) == pytest.approx(0.0, abs=1e-12)


def test_stability_form_rejects_nonzero_trace(g17):
    base = StableBase.constant(g17)
    with pytest.raises(box.NonzeroTrace):
        box.stability_form(base, BoxField(g17, np.ones(g17.shape + (3,))))


def test_stability_form_equals_minus_pairing(geo17):
    rng = np.random.default_rng(2)
    phi = box.project_tangent(geo17, random_zero_trace(geo17.grid, rng))
    Lphi = box.apply_linearized(geo17, phi)
    pairing = -float(np.sum(Lphi.values * phi.values)) * geo17.grid.cell_volume
    assert box.stability_form(geo17, phi) == pytest.approx(pairing, rel=1e-10)


@pytest.mark.parametrize("d", [2, 3])
def test_stability_constant_of_constant_base(d):
    g = BoxGrid(d, 17)
    base = StableBase.constant(g)
    M = box.estimate_stability_constant(base)
    assert M == pytest.approx(box.first_eigenvalue(g), rel=1e-8)
    assert base.M == M


@pytest.mark.parametrize("k", [2.0, 3.0])
def test_geodesic_stability_constant(g17, k):
    base = StableBase.geodesic(g17, k)
    kappa = (np.sin(k * g17.h) / g17.h) ** 2
    M = box.estimate_stability_constant(base)
    assert M == pytest.approx(box.first_eigenvalue(g17) - kappa, rel=1e-8)
    assert M == pytest.approx(box.stability_constant_oracle(base), rel=1e-8)


def test_flip_curvature_matches_oracle_and_shifts_normal_direction(g17):
    k = 2.0
    kappa = (np.sin(k * g17.h) / g17.h) ** 2
    std, alt = StableBase.geodesic(g17, k), StableBase.geodesic(g17, k, flip_curvature=True)
    assert box.estimate_stability_constant(alt) == pytest.approx(box.stability_constant_oracle(alt), rel=1e-8)
    phi = sine_mode(g17, (0.0, 0.0, 1.0))
    mass = float(np.sum(phi.values**2)) * g17.cell_volume
    diff = (box.stability_form(alt, phi) - box.stability_form(std, phi)) / mass
    assert diff == pytest.approx(2 * kappa, rel=1e-10)


def test_resonance_is_indefinite(g17):
    base = StableBase.geodesic(g17, box.resonant_speed(g17))
    with pytest.raises(box.IndefiniteForm) as exc:
        box.estimate_stability_constant(base)
    assert abs(exc.value.M) < 1e-8 * box.first_eigenvalue(g17)


def test_weak_residual_of_geodesic_vanishes(geo17):
    assert geo17.weak_residual < 1e-12
    assert StableBase.constant(geo17.grid).weak_residual == 0


def test_base_must_lie_on_target(g17):
    with pytest.raises(ValueError):
        StableBase(BoxField(g17, np.full(g17.shape + (3,), 0.5)))


# -- linearized operator ----------------------------------------------------


def test_summation_by_parts(geo17):
    rng = np.random.default_rng(4)
    a, b = random_zero_trace(geo17.grid, rng), random_zero_trace(geo17.grid, rng)
    lhs = float(np.sum(box.apply_linearized(geo17, a).values * b.values))
    rhs = float(np.sum(a.values * box.apply_linearized(geo17, b).values))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_linearized_is_laplacian_for_constant_base(g17):
    base = StableBase.constant(g17)
    w = random_zero_trace(g17, np.random.default_rng(5))
    np.testing.assert_array_equal(box.apply_linearized(base, w).values, box.laplacian(g17, w.values))


@pytest.mark.parametrize("method", ["auto", "direct", "iterative"])
def test_solve_linearized_manufactured(geo17, method):
    grid = geo17.grid
    X = grid.node_coords()
    ws = np.sin(np.pi * X[..., :1]) * np.sin(2 * np.pi * X[..., 1:2]) * X[..., 2:] * (1 - X[..., 2:]) * [1.0, -2.0, 0.5]
    ws[grid.boundary_mask] = 0.0
    H = -box.apply_linearized(geo17, ws).values
    w = box.solve_linearized(geo17, H, method=method)
    assert np.abs(w.values - ws).max() < 1e-8
    assert np.abs(box.solve_linearized(geo17, np.zeros_like(H), method=method).values).max() == 0


def test_two_stage_agrees_with_direct(geo17):
    rng = np.random.default_rng(6)
    _, F = box.smooth_random_data(geo17.grid, rng)
    w, w2 = box.solve_linearized(geo17, F, two_stage=True)
    assert np.abs(w.values - w2.values).max() < 1e-8


def test_invertibility_check(g17, geo17):
    assert box.check_invertibility(StableBase.constant(g17)).sigma_min == 1.0
    rep = box.check_invertibility(geo17)
    assert rep.passed and 0.1 < rep.sigma_min < 1
    bad = box.check_invertibility(StableBase.geodesic(g17, box.resonant_speed(g17)))
    assert not bad.passed


# -- nonlinearity -----------------------------------------------------------


def test_nonlinearity_vanishes_at_base(geo17):
    z = np.zeros(geo17.v.values.shape)
    assert np.abs(box.nonlinearity_F(geo17, z, z).values).max() == 0


def test_nonlinearity_parts_sum(geo17):
    rng = np.random.default_rng(7)
    phi = 0.01 * random_zero_trace(geo17.grid, rng).values
    w = 0.01 * random_zero_trace(geo17.grid, rng).values
    p = box.nonlinearity_F(geo17, phi, w, parts=True)
    np.testing.assert_allclose(p.total.values, box.nonlinearity_F(geo17, phi, w).values, atol=1e-12)


def test_fixed_point_map_is_contractive_near_base(geo17):
    grid = geo17.grid
    rng = np.random.default_rng(8)
    phi = box.PerturbationProblem(geo17, box.rotated_data(geo17, 0.1)).phi_h
    eta = []
    for _ in range(3):
        w1, w2 = (box.project_tangent(geo17, random_zero_trace(grid, rng)).values * 1e-3 for _ in range(2))
        T1 = box.solve_linearized(geo17, box.nonlinearity_F(geo17, phi, w1))
        T2 = box.solve_linearized(geo17, box.nonlinearity_F(geo17, phi, w2))
        eta.append(box.w_norm(T1 - T2).total / box.w_norm(BoxField(grid, w1 - w2)).total)
    assert max(eta) < 1


# -- perturbation problem ---------------------------------------------------


@pytest.mark.parametrize("n", [9, 17])
def test_perturbation_matches_box_picard(n):
    g = BoxGrid(3, n)
    base = StableBase.constant(g)
    f = box.rotated_data(base, 0.1)
    u, tr = box.solve_perturbation(box.PerturbationProblem(base, f))
    up, tp = box.box_picard(g, f)
    assert tr.converged and tp.converged
    assert np.abs(u.values - up.values).max() < 1e-6


def test_zero_perturbation_returns_base(geo17):
    u, tr = box.solve_perturbation(box.PerturbationProblem(geo17, geo17.v.values))
    assert tr.iterations == 1
    np.testing.assert_array_equal(u.values, geo17.v.values)


def test_geodesic_base_perturbation_converges_and_refines():
    dists = []
    for n in (9, 17):
        base = StableBase.geodesic(BoxGrid(3, n), 2.0)
        u, tr = box.solve_perturbation(box.PerturbationProblem(base, box.rotated_data(base, 0.1, center=(0.5, 0.5, 0.5), width=0.1**0.5)))
        assert tr.converged and tr.max_ratio() < 1
        rep = box.verify_constraint_box(u)
        assert rep.tube_ok and rep.boundary_dist < 1e-12
        dists.append(rep.sup_dist)
    assert dists[1] < dists[0]


def test_perturbation_requires_stability(g17):
    base = StableBase.geodesic(g17, box.resonant_speed(g17))
    with pytest.raises(box.IndefiniteForm):
        box.solve_perturbation(box.PerturbationProblem(base, base.v.values))
    with pytest.raises(box.SingularOperator):
        opts = box.PerturbationOptions(require="invertible")
        box.solve_perturbation(box.PerturbationProblem(base, base.v.values, opts))


def test_perturbation_rejects_off_target_data(geo17):
    with pytest.raises(ValueError):
        box.PerturbationProblem(geo17, geo17.v.values * 1.1)


def test_flow_base_reproduces_geodesic():
    g = BoxGrid(3, 9)
    geo = StableBase.geodesic(g, 2.0)
    flow = StableBase.from_flow(g, geo.v.values, tau=0.05, tol=1e-13)
    assert np.abs(flow.v.values - geo.v.values).max() < 1e-8


# -- constants ----------------------------------------------------------------


def test_extension_constant_is_stable_under_refinement():
    c = box.extension_constant_study(ns=(9, 17), samples=3)
    assert max(c.values()) / min(c.values()) < 2


def test_key_estimate_constant_finite(geo17):
    _, F = box.smooth_random_data(geo17.grid, np.random.default_rng(9))
    c = box.key_estimate_constant(geo17, F)
    assert 0 < c < 10
