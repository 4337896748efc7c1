"""Picard iteration for the small-data Dirichlet problem on the half-space.

The fixed-point map is ``S u = v + N[Gamma~(u)(grad u, grad u)]`` with
``v`` the harmonic extension of the data and ``N`` the zero-trace potential.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import TargetManifold
from .halfspace import Field, boundary_mask, gradient, helmholtz_solve, laplacian, newton_potential, poisson_extend
from .norms import x_norm


class NonContraction(RuntimeError):
    def __init__(self, msg, trace=None, u=None):
        super().__init__(msg)
        self.trace = trace
        self.u = u


class MaxIterations(RuntimeError):
    def __init__(self, msg, trace=None, u=None):
        super().__init__(msg)
        self.trace = trace
        self.u = u


class DegeneratePair(ValueError):
    pass


@dataclass
class SolverOptions:
    """Picard settings.

    ``mode="bmo"`` measures residuals in the X semi-norm; ``slack`` is the
    additive constant allowed in the BMO distance bound.
    """

    max_iterations: int = 50
    residual_tolerance: float = 1e-8
    ball_radius: float = 0.05
    damping: float = 1.0
    slack: float = 0.0
    mode: str = "linf"
    burn_in: int = 3
    noncontraction_window: int = 5
    backend: str = "fast"
    boundary: str = "green"
    tol_sub: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.residual_tolerance <= 0 or self.ball_radius <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.mode not in ("linf", "bmo"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class IterationTrace:
    residuals: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    distance_to_v: list = field(default_factory=list)
    sup_dist: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    status: str = "running"

    def limiting_ratio(self, burn_in=3):
        """Geometric mean of the ratios recorded after the burn-in (all ratios if fewer)."""
        r = [x for x in self.ratios[burn_in:] if x > 0] or [x for x in self.ratios if x > 0]
        if not r:
            return 0.0
        return float(np.exp(np.mean(np.log(r))))

    def max_ratio(self, burn_in=3):
        r = self.ratios[burn_in:]
        return float(max(r)) if r else 0.0


@dataclass
class ConstraintReport:
    sup_dist: float
    subharmonic_defect: float
    boundary_dist: float
    tube_ok: bool


def source_term(u, M):
    """sum_j Gamma~(u)(d_j u, d_j u) at every node."""
    grads = gradient(u.grid, u)
    return Field(u.grid, M.gamma_tilde_sum(u.values, grads))


def apply_S(v, u, M=None, opts=None):
    """S u = v + N[Gamma~(u)(grad u, grad u)]."""
    M = M or TargetManifold.sphere(m=u.m)
    opts = opts or SolverOptions()
    src = source_term(u, M)
    if not np.any(src.values):
        return v.copy()
    w = newton_potential(v.grid, src, backend=opts.backend, boundary=opts.boundary)
    return v + w


def _residual(diff, opts):
    rep = x_norm(diff)
    return rep.seminorm if opts.mode == "bmo" else rep.total


def _sup_dist(u, M):
    return float(np.max(M.dist_to_manifold(u.values)))


def solve(f, opts=None, M=None, u0=None, raise_on_failure=True):
    """Picard iteration u_{k+1} = (1 - a) u_k + a S u_k from u_0 = v.

    Returns ``(u, trace)``.  Raises :class:`NonContraction` once the ratio of
    successive residuals stays >= 1 for ``noncontraction_window`` steps past
    the burn-in, and :class:`MaxIterations` when the budget runs out; both
    carry the trace and the last iterate.
    """
    opts = opts or SolverOptions()
    M = M or TargetManifold.sphere(m=f.m)
    grid = f.grid
    v = poisson_extend(grid, f)
    u = v.copy() if u0 is None else u0.copy()
    trace = IterationTrace()
    streak = 0
    for k in range(opts.max_iterations):
        Su = apply_S(v, u, M, opts)
        u_new = Su if opts.damping == 1.0 else u * (1 - opts.damping) + Su * opts.damping
        res = _residual(u_new - u, opts)
        trace.residuals.append(res)
        if len(trace.residuals) > 1 and trace.residuals[-2] > 0:
            trace.ratios.append(res / trace.residuals[-2])
        trace.distance_to_v.append(_residual(u_new - v, opts))
        trace.sup_dist.append(_sup_dist(u_new, M) if M.kind == "sphere" else float("nan"))
        trace.iterations = k + 1
        u = u_new
        if res < opts.residual_tolerance:
            trace.converged = True
            trace.status = "converged"
            return u, trace
        if k >= opts.burn_in and trace.ratios and trace.ratios[-1] >= 1.0:
            streak += 1
        else:
            streak = 0
        if streak >= opts.noncontraction_window:
            trace.status = "noncontraction"
            if raise_on_failure:
                raise NonContraction(f"residual ratio >= 1 for {streak} steps", trace, u)
            return u, trace
    trace.status = "max_iterations"
    if raise_on_failure:
        raise MaxIterations(f"no convergence in {opts.max_iterations} iterations", trace, u)
    return u, trace


def estimate_contraction(v, u1, u2, M=None, opts=None):
    """||S u1 - S u2||_X / ||u1 - u2||_X."""
    den = x_norm(u1 - u2).total
    if den < 1e-14:
        raise DegeneratePair("u1 and u2 coincide on the grid")
    num = x_norm(apply_S(v, u1, M, opts) - apply_S(v, u2, M, opts)).total
    return num / den


def random_ball_field(v, eps, rng, modes=3):
    """A random smooth zero-trace perturbation w with ||w||_X = eps, returned as v + w."""
    grid = v.grid
    X = grid.node_coords()
    xs, z = X[..., :-1], X[..., -1]
    w = np.zeros(v.values.shape)
    for _ in range(modes):
        c = rng.uniform(-grid.L / 4, grid.L / 4, size=grid.d - 1)
        s = rng.uniform(0.5, 1.5)
        amp = rng.normal(size=v.m)
        prof = (z / s) * np.exp(-np.sum((xs - c) ** 2, axis=-1) / s**2 - z / s)
        w += prof[..., None] * amp
    w = Field(grid, w)
    return v + w * (eps / x_norm(w).total)


def verify_constraint(u, M=None, opts=None):
    """Distance of u to N and discrete subharmonicity of |Upsilon(u)|^2 / 2."""
    M = M or TargetManifold.sphere(m=u.m)
    grid = u.grid
    dist = M.dist_to_manifold(u.values)
    sup_dist = float(np.max(dist))
    bdist = float(np.max(dist[..., 0]))
    if not sup_dist < M.tube_radius:
        return ConstraintReport(sup_dist, float("nan"), bdist, False)
    G = 0.5 * dist**2
    lap = laplacian(grid, G[..., None])[..., 0]
    interior = ~boundary_mask(grid)
    defect = float(np.min(lap[interior])) if interior.any() else 0.0
    return ConstraintReport(sup_dist, defect, bdist, True)


def gradient_flow_oracle(f, M=None, tau=1.0, tol=1e-11, max_steps=2000, boundary=None, u0=None):
    """Projected semi-implicit harmonic-map flow to stationarity (sphere targets).

    One step solves ``(I - tau Delta) w = u + tau lam u`` with
    ``lam = -<Delta u, u>`` and sets ``u = w / |w|``.  Dirichlet values: the
    data at the bottom and ``boundary`` (default: the projected harmonic
    extension) on the artificial sides and top.  Returns ``(u, steps)``.
    """
    M = M or TargetManifold.sphere(m=f.m)
    if M.kind != "sphere":
        raise NotImplementedError("the flow oracle is written for sphere targets")
    grid = f.grid
    v = poisson_extend(grid, f)
    if boundary is None:
        bvals = v.values / np.linalg.norm(v.values, axis=-1, keepdims=True)
    else:
        bvals = boundary.values if isinstance(boundary, Field) else boundary
    bmask = boundary_mask(grid)
    bfull = np.where(bmask[..., None], bvals, 0.0)
    u = (v.values / np.linalg.norm(v.values, axis=-1, keepdims=True)) if u0 is None else u0.values.copy()
    u = np.where(bmask[..., None], bvals, u)
    for step in range(1, max_steps + 1):
        lap = laplacian(grid, u)
        lam = -np.einsum("...i,...i->...", lap, u)
        rhs = (u + tau * lam[..., None] * u) / tau
        w = helmholtz_solve(grid, rhs, bfull, 1.0 / tau)
        w = np.where(bmask[..., None], bvals, w / np.linalg.norm(w, axis=-1, keepdims=True))
        change = float(np.max(np.abs(w - u)))
        u = w
        if change < tol:
            break
    return Field(grid, u), step
