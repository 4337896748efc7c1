import numpy as np
import pytest

from roughmaps import data, solver
from roughmaps.geometry import TargetManifold
from roughmaps.halfspace import HalfSpaceGrid, poisson_extend
from roughmaps.norms import x_norm


@pytest.fixture(scope="module")
def grid():
    return HalfSpaceGrid(n=33)


@pytest.fixture(scope="module")
def cap_solution(grid):
    f = data.geodesic_cap(grid, 0.05)
    u, tr = solver.solve(f)
    return f, u, tr


def test_constant_data_is_fixed_in_one_step(grid):
    f = data.constant(grid)
    u, tr = solver.solve(f)
    assert tr.iterations == 1 and tr.converged
    np.testing.assert_array_equal(u.values, poisson_extend(grid, f).values)


def test_cap_converges_with_contracting_ratios(cap_solution):
    _, u, tr = cap_solution
    assert tr.converged and tr.status == "converged"
    assert tr.residuals[-1] < 1e-8
    assert tr.max_ratio() < 1
    assert 0 < tr.limiting_ratio() < 0.1


def test_fixed_point_equation_holds(cap_solution):
    f, u, _ = cap_solution
    v = poisson_extend(f.grid, f)
    assert x_norm(solver.apply_S(v, u) - u).total < 1e-7


def test_solution_lies_near_sphere(cap_solution):
    _, u, tr = cap_solution
    rep = solver.verify_constraint(u)
    assert rep.tube_ok
    assert rep.sup_dist < 1e-4
    assert rep.boundary_dist < 1e-12
    assert rep.sup_dist == pytest.approx(tr.sup_dist[-1])


def test_max_iterations_raises_with_trace(grid):
    f = data.geodesic_cap(grid, 0.05)
    with pytest.raises(solver.MaxIterations) as exc:
        solver.solve(f, solver.SolverOptions(max_iterations=1))
    assert exc.value.trace.iterations == 1 and exc.value.u is not None
    u, tr = solver.solve(f, solver.SolverOptions(max_iterations=1), raise_on_failure=False)
    assert tr.status == "max_iterations" and not tr.converged


def test_noncontraction_detected(grid):
    # a two-sided step with a 2 rad jump is far outside the small-data regime
    f = data.step_geodesic(grid, angle=1.0, two_sided=True)
    opts = solver.SolverOptions(max_iterations=40, burn_in=1, noncontraction_window=2)
    _, tr = solver.solve(f, opts, raise_on_failure=False)
    assert tr.status == "noncontraction" and not tr.converged
    with pytest.raises(solver.NonContraction):
        solver.solve(f, opts)


def test_damping_reaches_same_fixed_point(grid, cap_solution):
    f, u, _ = cap_solution
    ud, tr = solver.solve(f, solver.SolverOptions(damping=0.7, residual_tolerance=1e-10, max_iterations=80))
    assert np.abs(ud.values - u.values).max() < 1e-7


def test_estimate_contraction(cap_solution):
    f, u, _ = cap_solution
    v = poisson_extend(f.grid, f)
    rng = np.random.default_rng(1)
    eps = 0.05 * x_norm(v).seminorm + 1e-3
    u1 = solver.random_ball_field(v, eps, rng)
    u2 = solver.random_ball_field(v, eps, rng)
    theta = solver.estimate_contraction(v, u1, u2)
    assert 0 < theta < 1
    with pytest.raises(solver.DegeneratePair):
        solver.estimate_contraction(v, u1, u1)


def test_random_ball_field_has_requested_size(grid):
    v = poisson_extend(grid, data.geodesic_cap(grid, 0.1))
    w = solver.random_ball_field(v, 0.02, np.random.default_rng(0))
    assert x_norm(w - v).total == pytest.approx(0.02, rel=1e-12)
    assert np.abs((w - v).values[..., 0, :]).max() == 0


@pytest.mark.parametrize(
    "kw",
    [{"max_iterations": 0}, {"residual_tolerance": 0}, {"damping": 0}, {"damping": 1.5}, {"mode": "l2"}],
)
def test_options_validation(kw):
    with pytest.raises(ValueError):
        solver.SolverOptions(**kw)


def test_bmo_mode_converges(grid):
    f = data.geodesic_cap(grid, 0.05)
    _, tr = solver.solve(f, solver.SolverOptions(mode="bmo"))
    assert tr.converged


def test_source_term_vanishes_for_constant(grid):
    v = poisson_extend(grid, data.constant(grid))
    src = solver.source_term(v, TargetManifold.sphere())
    assert np.abs(src.values).max() == 0


def test_oracle_agreement_small_grid():
    g = HalfSpaceGrid(n=33)
    f = data.geodesic_cap(g, 0.05)
    u, _ = solver.solve(f, solver.SolverOptions(residual_tolerance=1e-10))
    o, steps = solver.gradient_flow_oracle(f)
    assert np.linalg.norm(o.values, axis=-1) == pytest.approx(1.0)
    assert np.abs(o.values - u.values).max() < 1e-3


def test_fixed_point_independent_of_extension(implicit_sphere):
    # the implicit target differentiates its projection numerically, so its residual floor sits near 1e-8
    g = HalfSpaceGrid(n=17)
    f = data.geodesic_cap(g, 0.05)
    u, _ = solver.solve(f)
    ui, tr = solver.solve(f, solver.SolverOptions(residual_tolerance=1e-7), M=implicit_sphere)
    assert tr.converged
    assert np.abs(ui.values - u.values).max() < 1e-7
