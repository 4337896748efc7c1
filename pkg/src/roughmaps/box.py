"""Perturbation of a stable harmonic map on the unit box.

Everything lives on the uniform grid of ``(0, 1)^d`` with ``n`` nodes per
axis.  The Jacobi operator is ``L_v w = Delta w - c(w)`` with ``c`` the
curvature coupling of :func:`geometry.curvature_term` (second-variation
sign), so that ``Q_v(phi) = -sum <L_v phi, phi> h^d`` for zero-trace
``phi``.  The perturbation ``w`` of ``u = v + phi_h + w`` solves
``-L_v w = F(w)`` with ``F = Gamma~(u)(du, du) - Gamma~(v)(dv, dv) + c(w)``.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .geometry import TargetManifold, curvature_term
from .norms import NormReport
from .solver import IterationTrace, MaxIterations, NonContraction


class NonzeroTrace(ValueError):
    pass


class IndefiniteForm(RuntimeError):
    def __init__(self, msg, M=None):
        super().__init__(msg)
        self.M = M


class SingularOperator(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# grid and fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxGrid:
    """Uniform grid on the unit cube ``(0, 1)^d`` with ``n`` nodes per axis."""

    d: int = 3
    n: int = 33

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("box grids are 2- or 3-dimensional")
        if self.n < 3:
            raise ValueError("need at least 3 nodes per axis")

    @property
    def h(self):
        return 1.0 / (self.n - 1)

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def inner_shape(self):
        return (self.n - 2,) * self.d

    @property
    def n_inner(self):
        return (self.n - 2) ** self.d

    @property
    def cell_volume(self):
        return self.h**self.d

    @cached_property
    def coords(self):
        return np.linspace(0.0, 1.0, self.n)

    def node_coords(self):
        return np.stack(np.meshgrid(*([self.coords] * self.d), indexing="ij"), axis=-1)

    @cached_property
    def dist(self):
        """Distance to the boundary of the cube at every node."""
        x = self.node_coords()
        return np.min(np.minimum(x, 1.0 - x), axis=-1)

    @cached_property
    def boundary_mask(self):
        return self.dist == 0.0

    @cached_property
    def boundary_index(self):
        return np.argwhere(self.boundary_mask)

    def inner(self, a):
        """Restriction of a nodal array to the interior nodes."""
        return a[(slice(1, -1),) * self.d]


@dataclass
class BoxField:
    grid: BoxGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == self.grid.d:
            v = v[..., None]
        if v.shape[:-1] != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field has non-finite entries")
        self.values = v

    @property
    def m(self):
        return self.values.shape[-1]

    @property
    def trace(self):
        return self.values[self.grid.boundary_mask]

    def copy(self):
        return BoxField(self.grid, self.values.copy())

    def __add__(self, other):
        return BoxField(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return BoxField(self.grid, self.values - _vals(other))

    def __mul__(self, s):
        return BoxField(self.grid, self.values * s)

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, BoxField) else x


def zero_field(grid, m=3):
    return BoxField(grid, np.zeros(grid.shape + (m,)))


# ---------------------------------------------------------------------------
# finite differences and the fast Poisson solve
# ---------------------------------------------------------------------------


def laplacian(grid, values):
    """Standard (2d+1)-point Laplacian at interior nodes, zero on the boundary."""
    u = np.asarray(values, dtype=float)
    out = np.zeros_like(u)
    core = (slice(1, -1),) * grid.d
    acc = -2.0 * grid.d * u[core]
    for ax in range(grid.d):
        lo = list(core)
        hi = list(core)
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        acc = acc + u[tuple(lo)] + u[tuple(hi)]
    out[core] = acc / grid.h**2
    return out


def gradient(grid, values):
    """Central differences (second-order one-sided at the faces); shape (..., d, m)."""
    u = np.asarray(values, dtype=float)
    g = np.gradient(u, grid.h, axis=tuple(range(grid.d)), edge_order=2)
    return np.stack(g, axis=-2)


def _dirichlet_eigs(grid):
    k = np.arange(1, grid.n - 1)
    lam1 = (2.0 / grid.h**2) * (1.0 - np.cos(np.pi * k * grid.h))
    total = np.zeros(grid.inner_shape)
    for ax in range(grid.d):
        sh = [1] * grid.d
        sh[ax] = -1
        total = total + lam1.reshape(sh)
    return total


def first_eigenvalue(grid):
    """Smallest eigenvalue of the discrete Dirichlet Laplacian: d (2/h^2)(1 - cos(pi h))."""
    return grid.d * (2.0 / grid.h**2) * (1.0 - np.cos(np.pi * grid.h))


def _dst_solve(grid, rhs_inner, shift=0.0):
    """Solve (-Delta_h - shift) y = rhs on the interior nodes by DST-I; rhs shape inner + (m,)."""
    axes = tuple(range(grid.d))
    eig = _dirichlet_eigs(grid) - shift
    r = sfft.dstn(rhs_inner, type=1, axes=axes, norm="ortho", workers=kernels.FFT_WORKERS)
    return sfft.idstn(r / eig[..., None], type=1, axes=axes, norm="ortho", workers=kernels.FFT_WORKERS)


def poisson_solve(grid, rhs, boundary_values=None, shift=0.0):
    """Solve ``-Delta_h u - shift u = rhs`` inside with ``u = boundary_values`` on the faces."""
    rhs = np.asarray(rhs, dtype=float)
    squeeze = rhs.ndim == grid.d
    if squeeze:
        rhs = rhs[..., None]
    b = np.zeros(grid.shape + rhs.shape[-1:])
    if boundary_values is not None:
        bv = np.asarray(boundary_values, dtype=float)
        if bv.ndim == grid.d:
            bv = bv[..., None]
        b[grid.boundary_mask] = bv[grid.boundary_mask]
    inner = grid.inner(rhs) + grid.inner(laplacian(grid, b))
    out = b.copy()
    out[(slice(1, -1),) * grid.d] = _dst_solve(grid, inner, shift)
    return out[..., 0] if squeeze else out


def harmonic_extension(grid, boundary_values):
    """Discrete harmonic function with the given face values (interior entries ignored)."""
    bv = boundary_values.values if isinstance(boundary_values, BoxField) else np.asarray(boundary_values, float)
    return BoxField(grid, poisson_solve(grid, np.zeros(bv.shape), bv))


def newton_potential(grid, F):
    """Zero-trace solution of -Delta_h w = F."""
    vals = F.values if isinstance(F, BoxField) else np.asarray(F, float)
    return BoxField(grid, poisson_solve(grid, vals))


def _laplace_matrix(grid):
    """Sparse -Delta_h on interior nodes (C order)."""
    N = grid.n - 2
    T = sp.diags([-np.ones(N - 1), 2 * np.ones(N), -np.ones(N - 1)], [-1, 0, 1]) / grid.h**2
    I = sp.identity(N)
    A = sp.csr_matrix((N**grid.d, N**grid.d))
    for ax in range(grid.d):
        ops = [I] * grid.d
        ops[ax] = T
        term = ops[0]
        for o in ops[1:]:
            term = sp.kron(term, o)
        A = A + term
    return A.tocsr()


# ---------------------------------------------------------------------------
# W and Z norms
# ---------------------------------------------------------------------------


def carleson_radii(grid, ratio=np.sqrt(2.0), rmax=0.5):
    k = int(np.floor(np.log(rmax / grid.h) / np.log(ratio) + 1e-9))
    return grid.h * ratio ** np.arange(k + 1)


def carleson_centers(grid, stride=None):
    """Boundary nodes used as centres; ``stride`` thins them along every axis."""
    if stride is None:
        stride = max(1, (grid.n - 1) // 32)
    idx = grid.boundary_index
    keep = np.all(idx % stride == 0, axis=1)
    return idx[keep]


def _region_sums(grid, vals, centers, rho):
    if grid.d == 2:
        return kernels.ball_sums_2d(vals, rho)[centers[:, 0], centers[:, 1]]
    return kernels.ball_sums_3d_at(vals, centers, rho)


def carleson_box(grid, q, radii=None, centers=None, power=1.0):
    """max over sampled regions of (r^(1-d) sum_{|y - xi| < r + h/2} q(y) h^d)^power."""
    radii = carleson_radii(grid) if radii is None else np.asarray(radii, float)
    centers = carleson_centers(grid) if centers is None else np.asarray(centers)
    vals = np.asarray(q, float) * grid.cell_volume
    best, arg = 0.0, None
    for r in radii:
        s = _region_sums(grid, vals, centers, r / grid.h + 0.5) * r ** (1 - grid.d)
        i = int(np.argmax(s))
        if s[i] > best:
            best = float(s[i])
            arg = {"center": (centers[i] * grid.h).tolist(), "radius": float(r)}
    return best**power, arg


def carleson_box_exhaustive(grid, q, radii=None, centers=None):
    """Brute-force companion of :func:`carleson_box` with explicit region masks."""
    radii = carleson_radii(grid) if radii is None else np.asarray(radii, float)
    centers = carleson_centers(grid) if centers is None else np.asarray(centers)
    X = grid.node_coords()
    vals = np.asarray(q, float) * grid.cell_volume
    best = 0.0
    for r in radii:
        for c in centers:
            xi = c * grid.h
            mask = np.sqrt(np.sum((X - xi) ** 2, axis=-1)) < r + grid.h / 2
            best = max(best, r ** (1 - grid.d) * float(vals[mask].sum()))
    return best


def w_norm(u, radii=None, centers=None):
    """sup|u| + sup d(x)|grad u| + sqrt of the Carleson energy of d(y)|grad u|^2."""
    grid = u.grid
    mag = np.linalg.norm(u.values, axis=-1)
    g2 = np.sum(gradient(grid, u.values) ** 2, axis=(-2, -1))
    wg = grid.dist * np.sqrt(g2)
    car, arg = carleson_box(grid, grid.dist * g2, radii, centers, power=0.5)
    X = grid.node_coords().reshape(-1, grid.d)
    argmax = {"sup": X[int(np.argmax(mag))].tolist(), "weighted_grad": X[int(np.argmax(wg))].tolist(), "carleson": arg}
    return NormReport(float(mag.max()), float(wg.max()), float(car), argmax=argmax)


def z_norm(F, radii=None, centers=None, detail=False):
    """sup d(x)^2 |F| + max over sampled regions of r^(1-d) int d(y)|F|."""
    grid = F.grid
    mag = np.linalg.norm(F.values, axis=-1)
    s = float(np.max(grid.dist**2 * mag))
    c, arg = carleson_box(grid, grid.dist * mag, radii, centers)
    if detail:
        return {"sup_term": s, "carleson_term": float(c), "total": s + float(c), "argmax": arg}
    return s + float(c)


# ---------------------------------------------------------------------------
# base maps
# ---------------------------------------------------------------------------


@dataclass
class StableBase:
    """Harmonic base map ``v`` on the box with its trace and stability data."""

    v: BoxField
    manifold: TargetManifold = None
    flip_curvature: bool = False
    M: float = None
    name: str = "base"

    def __post_init__(self):
        if self.manifold is None:
            self.manifold = TargetManifold.sphere(m=self.v.m)
        dist = float(np.max(self.manifold.dist_to_manifold(self.v.values)))
        if not dist <= 1e-8:
            raise ValueError(f"base map leaves the target (sup dist {dist:.3g})")

    @property
    def grid(self):
        return self.v.grid

    @property
    def g(self):
        return self.v.trace

    @cached_property
    def grads(self):
        return gradient(self.grid, self.v.values)

    @cached_property
    def smoothness(self):
        """Largest discrete second difference of v."""
        return float(np.max(np.abs(laplacian(self.grid, self.v.values)))) * self.grid.h**2

    @cached_property
    def weak_residual(self):
        """max over tangent tent functions at interior nodes of |int grad v . grad psi| / int psi."""
        lap = laplacian(self.grid, self.v.values)
        T = self.manifold.tangent_projector(self.v.values)
        r = np.einsum("...ab,...b->...a", T, lap)
        return float(np.max(np.abs(self.grid.inner(r))))

    def coupling(self, phi):
        """c(phi) at every node (zero on the faces)."""
        out = curvature_term(self.manifold, self.v.values, self.grads, phi, flip_curvature=self.flip_curvature)
        out[self.grid.boundary_mask] = 0.0
        return out

    @cached_property
    def blocks(self):
        """Matrices of the linear map c at the interior nodes, shape inner + (m, m)."""
        m = self.v.m
        v = self.grid.inner(self.v.values)
        gr = self.grid.inner(self.grads)
        C = np.empty(v.shape + (m,))
        for a in range(m):
            e = np.zeros(m)
            e[a] = 1.0
            C[..., a] = curvature_term(self.manifold, v, gr, np.broadcast_to(e, v.shape), flip_curvature=self.flip_curvature)
        return C

    @cached_property
    def trivial_coupling(self):
        return not np.any(self.blocks)

    @cached_property
    def operator(self):
        """Sparse -L_v on interior unknowns ordered (node, component)."""
        m = self.v.m
        A = sp.kron(_laplace_matrix(self.grid), sp.identity(m))
        Nn = self.grid.n_inner
        C = sp.bsr_matrix((self.blocks.reshape(Nn, m, m), np.arange(Nn), np.arange(Nn + 1)), shape=(Nn * m, Nn * m))
        return (A + C).tocsc()

    @cached_property
    def tangent_frames(self):
        """Orthonormal tangent bases at the interior nodes, shape (N, m-1, m)."""
        v = self.grid.inner(self.v.values).reshape(-1, self.v.m)
        return self.manifold.tangent_basis(v)

    @classmethod
    def constant(cls, grid, p=(0.0, 0.0, 1.0), manifold=None, flip_curvature=False):
        p = np.asarray(p, float)
        return cls(BoxField(grid, np.broadcast_to(p, grid.shape + p.shape).copy()), manifold, flip_curvature, name="constant")

    @classmethod
    def geodesic(cls, grid, k=2.0, flip_curvature=False):
        """v = (cos k x_1, sin k x_1, 0): a geodesic of the sphere with Delta_h v parallel to v."""
        x1 = grid.node_coords()[..., 0]
        v = np.stack([np.cos(k * x1), np.sin(k * x1), np.zeros_like(x1)], axis=-1)
        return cls(BoxField(grid, v), None, flip_curvature, name=f"geodesic(k={k:g})")

    @classmethod
    def from_flow(cls, grid, boundary_values, tau=0.05, tol=1e-12, max_steps=20000, flip_curvature=False):
        """Run the projected semi-implicit harmonic-map flow from the given sphere-valued face data."""
        v, steps = harmonic_flow(grid, boundary_values, tau=tau, tol=tol, max_steps=max_steps)
        base = cls(v, None, flip_curvature, name="flow")
        base.flow_steps = steps
        return base

    def resonant_speed(self):
        """k with (sin(kh)/h)^2 equal to the first Dirichlet eigenvalue (see :meth:`geodesic`)."""
        return resonant_speed(self.grid)


def resonant_speed(grid):
    h = grid.h
    return float(np.arcsin(h * np.sqrt(first_eigenvalue(grid))) / h)


def harmonic_flow(grid, boundary_values, tau=0.05, tol=1e-12, max_steps=20000):
    """Projected flow for sphere-valued maps: (I - tau Delta) w = u + tau lam u, u <- w/|w|."""
    bv = boundary_values.values if isinstance(boundary_values, BoxField) else np.asarray(boundary_values, float)
    bmask = grid.boundary_mask
    u = harmonic_extension(grid, bv).values
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    u[bmask] = bv[bmask]
    for step in range(1, max_steps + 1):
        lam = -np.einsum("...i,...i->...", laplacian(grid, u), u)
        rhs = (u + tau * lam[..., None] * u) / tau
        w = poisson_solve(grid, rhs, u, shift=-1.0 / tau)
        w = w / np.linalg.norm(w, axis=-1, keepdims=True)
        w[bmask] = bv[bmask]
        change = float(np.max(np.abs(w - u)))
        u = w
        if change < tol:
            break
    return BoxField(grid, u), step


# ---------------------------------------------------------------------------
# stability form and the Jacobi operator
# ---------------------------------------------------------------------------


def _check_trace(phi, tol=0.0):
    if np.max(np.abs(phi.trace), initial=0.0) > tol:
        raise NonzeroTrace("test field must vanish on the boundary")


def project_tangent(base, phi):
    T = base.manifold.tangent_projector(base.v.values)
    return BoxField(base.grid, np.einsum("...ab,...b->...a", T, phi.values))


def stability_form(base, phi):
    """Q_v(phi) = sum over edges |phi_i - phi_j|^2 h^(d-2) + sum <c(phi), phi> h^d, phi projected to T_vN."""
    _check_trace(phi)
    grid = base.grid
    pt = project_tangent(base, phi).values
    edges = sum(float(np.sum(np.diff(pt, axis=ax) ** 2)) for ax in range(grid.d))
    coup = float(np.sum(base.coupling(pt) * pt))
    return edges * grid.h ** (grid.d - 2) + coup * grid.cell_volume


def apply_linearized(base, w):
    """L_v w = Delta_h w - c(w) at interior nodes (zero on the faces)."""
    vals = w.values if isinstance(w, BoxField) else np.asarray(w, float)
    return BoxField(base.grid, laplacian(base.grid, vals) - base.coupling(vals))


def _tangent_reduction(base):
    """Sparse B with B a = sum_k a_k e_k per node (tangent coefficients -> R^m)."""
    E = base.tangent_frames  # (N, m-1, m)
    N, t, m = E.shape
    data = np.transpose(E, (0, 2, 1))  # (N, m, m-1)
    return sp.bsr_matrix((data, np.arange(N), np.arange(N + 1)), shape=(N * m, N * t)).tocsr()


def tangent_form_matrix(base):
    """The stability form on tangent coefficients at interior nodes (unit mass matrix)."""
    B = _tangent_reduction(base)
    return (B.T @ base.operator @ B).tocsr()


INDEFINITE_RTOL = 1e-9


def _shift(base):
    lo = float(np.min(np.linalg.eigvalsh(base.blocks))) if base.blocks.size else 0.0
    return min(0.0, lo) - 1.0


def estimate_stability_constant(base, tol=1e-11, max_iterations=300, block=6, seed=0, raise_on_indefinite=True):
    """Smallest Rayleigh quotient of Q_v over zero-trace tangent fields.

    Shifted block inverse iteration with Rayleigh-Ritz on the tangent-reduced
    form; the inner solves use conjugate gradients preconditioned by the
    shifted DST Laplacian.  The form counts as indefinite when
    ``M <= indefinite_rtol * lambda_1``.  Stores the estimate on ``base.M``.
    """
    grid = base.grid
    A = tangent_form_matrix(base)
    s = _shift(base)
    B = _tangent_reduction(base)
    shape = grid.inner_shape + (base.v.m,)

    def prec(x):
        y = _dst_solve(grid, (B @ x).reshape(shape), shift=s)
        return B.T @ y.ravel()

    P = spla.LinearOperator(A.shape, matvec=prec, dtype=float)
    As = A - s * sp.identity(A.shape[0], format="csr")
    p = min(block, A.shape[0])
    X, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((A.shape[0], p)))
    lam_old = np.inf
    for _ in range(max_iterations):
        Y = np.column_stack([spla.cg(As, X[:, j], rtol=1e-12, atol=0.0, M=P, maxiter=1000)[0] for j in range(p)])
        Q, _ = np.linalg.qr(Y)
        theta, V = np.linalg.eigh(Q.T @ (A @ Q))
        X = Q @ V
        lam = float(theta[0])
        if abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
            break
        lam_old = lam
    base.M = lam
    base.stability_vector = X[:, 0]
    if lam <= INDEFINITE_RTOL * first_eigenvalue(grid) and raise_on_indefinite:
        raise IndefiniteForm(f"stability form is not positive (M = {lam:.6g})", lam)
    return lam


def stability_constant_oracle(base):
    """Dense-free shift-invert Lanczos value of the same minimum (small grids)."""
    A = tangent_form_matrix(base)
    val = spla.eigsh(A.tocsc(), k=1, sigma=_shift(base), which="LM", return_eigenvectors=False)
    return float(val[0])


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------

DIRECT_LIMIT = 40000


class _JacobiSolver:
    """Solves -L_v w = H with zero trace: DST when c = 0, sparse LU for small systems, MINRES otherwise."""

    def __init__(self, base, method="auto"):
        self.base = base
        grid = base.grid
        nunk = grid.n_inner * base.v.m
        if method == "auto":
            method = "fast" if base.trivial_coupling else ("direct" if nunk <= DIRECT_LIMIT else "iterative")
        self.method = method
        if method == "direct":
            try:
                self.lu = spla.splu(base.operator)
            except RuntimeError as exc:
                raise SingularOperator(str(exc)) from exc

    def solve_inner(self, H):
        """H, result: interior arrays of shape inner + (m,)."""
        grid = self.base.grid
        if self.method == "fast":
            return _dst_solve(grid, H)
        A = self.base.operator
        b = H.ravel()
        if self.method == "direct":
            x = self.lu.solve(b)
        else:
            shape = H.shape
            P = spla.LinearOperator(A.shape, matvec=lambda r: _dst_solve(grid, r.reshape(shape)).ravel(), dtype=float)
            x, info = spla.minres(A, b, M=P, rtol=1e-14, maxiter=2000)
            if info != 0:
                raise SingularOperator("MINRES did not converge on the Jacobi system")
        if not np.all(np.isfinite(x)):
            raise SingularOperator("Jacobi solve produced non-finite values")
        bnorm = np.linalg.norm(b)
        if bnorm > 0:
            berr = np.linalg.norm(A @ x - b) / (_onenorm(A) * np.linalg.norm(x) + bnorm)
            if berr > 1e-10:
                raise SingularOperator(f"Jacobi system is numerically singular (backward error {berr:.2e})")
        return x.reshape(H.shape)


def _onenorm(A):
    return float(abs(A).sum(axis=0).max())


def _solver(base, method="auto"):
    cache = base.__dict__.setdefault("_solvers", {})
    if method not in cache:
        cache[method] = _JacobiSolver(base, method)
    return cache[method]


def solve_linearized(base, H, method="auto", two_stage=False):
    """Zero-trace w with -L_v w = H.

    ``two_stage=True`` returns ``(w, w_check)`` where ``w_check = w0 + w1`` with
    ``-Delta w0 = H`` and ``-L_v w1 = -c(w0)``.
    """
    grid = base.grid
    vals = H.values if isinstance(H, BoxField) else np.asarray(H, float)
    sol = _solver(base, method)
    w = np.zeros(grid.shape + (base.v.m,))
    w[(slice(1, -1),) * grid.d] = sol.solve_inner(grid.inner(vals))
    w = BoxField(grid, w)
    if not two_stage:
        return w
    w0 = newton_potential(grid, vals)
    w1 = np.zeros_like(w.values)
    w1[(slice(1, -1),) * grid.d] = sol.solve_inner(-grid.inner(base.coupling(w0.values)))
    return w, w0 + w1


@dataclass
class InvertibilityReport:
    sigma_min: float
    threshold: float
    passed: bool


def check_invertibility(base, threshold=1e-8):
    """Smallest singular value of I + K, K = (-Delta_h)^(-1) c, on zero-trace fields."""
    if base.trivial_coupling:
        return InvertibilityReport(1.0, threshold, True)
    grid = base.grid
    m = base.v.m
    A = base.operator
    n = A.shape[0]
    lap = sp.kron(_laplace_matrix(grid), sp.identity(m)).tocsr()
    try:
        lu = spla.splu(A)
    except RuntimeError:
        return InvertibilityReport(0.0, threshold, False)
    # (I + K)^(-1) = (-L)^(-1)(-Delta); its adjoint is (-Delta)(-L)^(-1)
    op = spla.LinearOperator(
        (n, n),
        matvec=lambda x: lu.solve(lap @ x),
        rmatvec=lambda x: lap @ lu.solve(x),
        dtype=float,
    )
    smax = spla.svds(op, k=1, which="LM", return_singular_vectors=False, random_state=0)[0]
    sigma = 0.0 if not np.isfinite(smax) or smax == 0 else 1.0 / float(smax)
    return InvertibilityReport(sigma, threshold, bool(sigma > threshold))


# ---------------------------------------------------------------------------
# nonlinearity and the perturbation fixed point
# ---------------------------------------------------------------------------


@dataclass
class NonlinearityParts:
    F1: BoxField
    F2: BoxField
    F3: BoxField

    @property
    def total(self):
        return self.F1 + self.F2 + self.F3


def nonlinearity_F(base, phi_h, w, parts=False):
    """F(w) = Gamma~(u)(du, du) - Gamma~(v)(dv, dv) + c(w), u = v + phi_h + w.

    Split as F1 = Gamma~(v)(du, du) - Gamma~(v)(dv, dv), F2 = c(w) and
    F3 = Gamma~(u)(du, du) - Gamma~(v)(du, du).
    """
    grid = base.grid
    M = base.manifold
    v = base.v.values
    u = v + _vals(phi_h) + _vals(w)
    gu = gradient(grid, u)
    gv = base.grads
    Gv_u = M.gamma_tilde_sum(v, gu)
    F1 = Gv_u - M.gamma_tilde_sum(v, gv)
    F2 = base.coupling(_vals(w))
    F3 = M.gamma_tilde_sum(u, gu) - Gv_u
    out = NonlinearityParts(*(BoxField(grid, _zero_faces(grid, a)) for a in (F1, F2, F3)))
    return out if parts else out.total


def _zero_faces(grid, a):
    a = np.array(a, dtype=float)
    a[grid.boundary_mask] = 0.0
    return a


@dataclass
class PerturbationOptions:
    max_iterations: int = 60
    residual_tolerance: float = 1e-10
    burn_in: int = 3
    noncontraction_window: int = 5
    require: str = "stable"  # "stable", "invertible" or "none"
    method: str = "auto"

    def __post_init__(self):
        if self.require not in ("stable", "invertible", "none"):
            raise ValueError(f"unknown requirement {self.require!r}")
        if self.max_iterations < 1 or self.residual_tolerance <= 0:
            raise ValueError("max_iterations and residual_tolerance must be positive")


@dataclass
class PerturbationProblem:
    """New face data ``f`` (on N) near the trace of ``base.v``."""

    base: StableBase
    f: np.ndarray
    options: PerturbationOptions = field(default_factory=PerturbationOptions)

    def __post_init__(self):
        grid = self.base.grid
        f = np.asarray(self.f.values if isinstance(self.f, BoxField) else self.f, float)
        full = self.base.v.values.copy()
        full[grid.boundary_mask] = f[grid.boundary_mask]
        self.f = full
        dist = self.base.manifold.dist_to_manifold(full[grid.boundary_mask])
        if np.max(dist) > 1e-8:
            raise ValueError("boundary data must take values in the target")

    @property
    def h(self):
        out = np.zeros_like(self.f)
        bm = self.base.grid.boundary_mask
        out[bm] = self.f[bm] - self.base.v.values[bm]
        return out

    @property
    def h_sup(self):
        return float(np.max(np.linalg.norm(self.h, axis=-1)))

    @cached_property
    def phi_h(self):
        return harmonic_extension(self.base.grid, self.h)


def _certify(base, require):
    if require == "none":
        return
    if require == "stable":
        if base.M is None:
            estimate_stability_constant(base)
        elif base.M <= INDEFINITE_RTOL * first_eigenvalue(base.grid):
            raise IndefiniteForm(f"stability form is not positive (M = {base.M:.6g})", base.M)
        return
    rep = check_invertibility(base)
    if not rep.passed:
        raise SingularOperator(f"I + K is numerically singular (sigma_min = {rep.sigma_min:.3g})")


def solve_perturbation(problem, raise_on_failure=True):
    """w_(k+1) = (-L_v)^(-1) F(w_k) from w_0 = 0; returns ``(u, trace)`` with u = v + phi_h + w."""
    base = problem.base
    opts = problem.options
    _certify(base, opts.require)
    phi = problem.phi_h
    w = zero_field(base.grid, base.v.m)
    trace = IterationTrace()
    streak = 0
    M = base.manifold
    for k in range(opts.max_iterations):
        w_new = solve_linearized(base, nonlinearity_F(base, phi, w), method=opts.method)
        res = w_norm(w_new - w).total
        trace.residuals.append(res)
        if len(trace.residuals) > 1 and trace.residuals[-2] > 0:
            trace.ratios.append(res / trace.residuals[-2])
        trace.distance_to_v.append(w_norm(w_new).total)
        u = base.v + phi + w_new
        trace.sup_dist.append(float(np.max(M.dist_to_manifold(u.values))))
        trace.iterations = k + 1
        w = w_new
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


def box_picard(grid, f, manifold=None, tol=1e-10, max_iterations=100):
    """u_(k+1) = H f + N[Gamma~(u_k)(du_k, du_k)] with DST solves on the box."""
    vals = f.values if isinstance(f, BoxField) else np.asarray(f, float)
    M = manifold or TargetManifold.sphere(m=vals.shape[-1])
    Hf = harmonic_extension(grid, vals)
    u = Hf.values
    trace = IterationTrace()
    for k in range(max_iterations):
        src = _zero_faces(grid, M.gamma_tilde_sum(u, gradient(grid, u)))
        u_new = Hf.values + poisson_solve(grid, src)
        res = float(np.max(np.abs(u_new - u)))
        trace.residuals.append(res)
        if len(trace.residuals) > 1 and trace.residuals[-2] > 0:
            trace.ratios.append(res / trace.residuals[-2])
        trace.iterations = k + 1
        u = u_new
        if res < tol:
            trace.converged = True
            trace.status = "converged"
            break
    else:
        trace.status = "max_iterations"
    return BoxField(grid, u), trace


@dataclass
class BoxConstraintReport:
    sup_dist: float
    subharmonic_defect: float
    boundary_dist: float
    tube_ok: bool


def verify_constraint_box(u, manifold=None):
    grid = u.grid
    M = manifold or TargetManifold.sphere(m=u.m)
    dist = M.dist_to_manifold(u.values)
    sup = float(np.max(dist))
    bd = float(np.max(dist[grid.boundary_mask]))
    if not sup < M.tube_radius:
        return BoxConstraintReport(sup, float("nan"), bd, False)
    lap = laplacian(grid, 0.5 * dist**2)
    return BoxConstraintReport(sup, float(np.min(grid.inner(lap))), bd, True)


# ---------------------------------------------------------------------------
# constants of the linear theory
# ---------------------------------------------------------------------------


def smooth_random_data(grid, rng, m=3, modes=3):
    """Random smooth face data and interior source, both low-frequency trigonometric sums."""
    X = grid.node_coords()
    f = np.zeros(grid.shape + (m,))
    F = np.zeros(grid.shape + (m,))
    for _ in range(modes):
        k = rng.uniform(0.5, 3.0, size=grid.d) * np.pi
        ph = rng.uniform(0, 2 * np.pi)
        f += np.cos(X @ k + ph)[..., None] * rng.normal(size=m)
        c = rng.uniform(0.2, 0.8, size=grid.d)
        F += np.exp(-np.sum((X - c) ** 2, axis=-1) / 0.05)[..., None] * rng.normal(size=m) * 10
    F[grid.boundary_mask] = 0.0
    return f, F


def extension_constant(grid, f, F):
    """[u]_W / (sup|f| + z(F)) for u = harmonic extension of f plus the potential of F."""
    u = harmonic_extension(grid, f) + newton_potential(grid, F)
    fsup = float(np.max(np.linalg.norm(np.asarray(f)[grid.boundary_mask], axis=-1)))
    return w_norm(u).seminorm / (fsup + z_norm(BoxField(grid, F)))


def extension_constant_study(ns=(17, 33, 65), d=3, samples=10, seed=0):
    """Largest extension constant over random inputs at each resolution."""
    out = {}
    for n in ns:
        grid = BoxGrid(d, n)
        rng = np.random.default_rng(seed)
        out[n] = max(extension_constant(grid, *smooth_random_data(grid, rng)) for _ in range(samples))
    return out


def key_estimate_constant(base, H, method="auto"):
    """||(-L_v)^(-1) H||_W / z(H)."""
    w = solve_linearized(base, H, method=method)
    return w_norm(w).total / z_norm(H if isinstance(H, BoxField) else BoxField(base.grid, H))


def rotated_data(base, amplitude=0.1, center=None, width=0.25):
    """Face data exp_v(a b(x) e(x)) with a Gaussian bump b centred on the bottom face.

    ``e`` is the first tangent basis vector of v; the result lies on the sphere.
    """
    grid = base.grid
    if not 0 <= amplitude < np.pi:
        raise ValueError(f"amplitude {amplitude} outside [0, pi)")
    c = np.full(grid.d, 0.5) if center is None else np.asarray(center, float)
    if center is None:
        c[-1] = 0.0
    X = grid.node_coords()
    ang = amplitude * np.exp(-np.sum((X - c) ** 2, axis=-1) / width**2)
    v = base.v.values
    e = base.manifold.tangent_basis(v)[..., 0, :]
    f = np.cos(ang)[..., None] * v + np.sin(ang)[..., None] * e
    out = v.copy()
    out[grid.boundary_mask] = f[grid.boundary_mask]
    return out
