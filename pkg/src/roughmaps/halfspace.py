"""Truncated, vertically graded upper half-space and its linear operators.

Horizontal nodes are uniform on ``[-L, L]^(d-1)``.  Vertical nodes are
``0 < H sigma^(K-1) < ... < H sigma < H`` plus the boundary level ``0``;
arrays carry the vertical axis ascending, so index 0 is the trace.  Field
arrays have shape ``(n,)*(d-1) + (K+1, c)``.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gamma as gamma_fn

from . import kernels


class NonpositiveHeight(ValueError):
    pass


class CoincidentPoints(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


def sphere_area(k):
    """Surface area of the unit sphere S^(k-1) in R^k."""
    return 2 * math.pi ** (k / 2) / gamma_fn(k / 2)


def poisson_constant(d):
    """c_d with int P_t = 1 over R^(d-1)."""
    return gamma_fn(d / 2) / math.pi ** (d / 2)


def green_constant(d):
    """kappa_d of the fundamental solution kappa_d |x|^(2-d) of -Delta."""
    return 1.0 / ((d - 2) * sphere_area(d))


# ---------------------------------------------------------------------------
# grid / fields / data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HalfSpaceGrid:
    """Sampling of ``R^d_+`` truncated to ``[-L, L]^(d-1) x [0, H]``.

    ``K`` positive levels ``H sigma^k`` are used, with ``K`` the smallest
    value (at least 4) that puts the lowest level at or below ``h``.
    """

    d: int = 3
    m: int = 3
    L: float = 4.0
    n: int = 129
    H: float = 8.0
    sigma: float = 0.75
    base_point: Optional[tuple] = None

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("half-space grid needs d >= 3")
        if self.n < 5:
            raise ValueError("need n >= 5")
        if not (self.L > 0 and self.H > 0 and 0 < self.sigma < 1):
            raise ValueError("need L > 0, H > 0, 0 < sigma < 1")
        if self.base_point is None:
            bp = np.zeros(self.m)
            bp[-1] = 1.0
            object.__setattr__(self, "base_point", tuple(bp))
        if len(self.base_point) != self.m:
            raise ValueError("base point has wrong dimension")

    @property
    def h(self):
        return 2 * self.L / (self.n - 1)

    @property
    def K(self):
        k = math.ceil(math.log(self.h / self.H) / math.log(self.sigma) - 1e-9) + 1
        return max(4, k)

    @property
    def p(self):
        return np.array(self.base_point, dtype=float)

    @property
    def coords(self):
        # exactly symmetric about 0
        return self.h * (np.arange(self.n) - (self.n - 1) / 2)

    @property
    def z(self):
        """Vertical nodes, ascending, starting with the boundary level 0."""
        lev = self.H * self.sigma ** np.arange(self.K - 1, -1, -1, dtype=float)
        return np.concatenate([[0.0], lev])

    @property
    def levels(self):
        return self.z[1:]

    @property
    def hshape(self):
        return (self.n,) * (self.d - 1)

    @property
    def shape(self):
        return self.hshape + (self.K + 1,)

    @property
    def cell_area(self):
        return self.h ** (self.d - 1)

    def zweights(self):
        """Trapezoid weights of the vertical nodes."""
        z = self.z
        w = np.zeros_like(z)
        dz = np.diff(z)
        w[:-1] += dz / 2
        w[1:] += dz / 2
        return w

    def volume_weights(self):
        """Quadrature weight per node, broadcastable to ``shape``."""
        return self.cell_area * self.zweights()

    def horizontal_mesh(self):
        """Stacked horizontal coordinates, shape ``hshape + (d-1,)``."""
        c = self.coords
        return np.stack(np.meshgrid(*([c] * (self.d - 1)), indexing="ij"), axis=-1)

    def node_coords(self):
        """All node coordinates, shape ``shape + (d,)``."""
        xh = self.horizontal_mesh()
        X = np.broadcast_to(xh[..., None, :], self.hshape + (self.K + 1, self.d - 1))
        Z = np.broadcast_to(self.z[(None,) * (self.d - 1) + (slice(None), None)], self.shape + (1,))
        return np.concatenate([X, Z], axis=-1)

    def with_(self, **kw):
        args = dict(d=self.d, m=self.m, L=self.L, n=self.n, H=self.H, sigma=self.sigma, base_point=self.base_point)
        args.update(kw)
        return HalfSpaceGrid(**args)


@dataclass
class Field:
    """Vector field sampled on a :class:`HalfSpaceGrid` (index 0 of the vertical axis is the trace)."""

    grid: HalfSpaceGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == len(self.grid.shape):
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
        return self.values[..., 0, :]

    def copy(self):
        return Field(self.grid, self.values.copy())

    def __add__(self, other):
        return Field(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return Field(self.grid, self.values - _vals(other))

    def __mul__(self, s):
        return Field(self.grid, self.values * s)

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, Field) else x


@dataclass
class BoundaryData:
    """Boundary map ``f = p + g`` with ``g`` supported in ``[-L/2, L/2]^(d-1)``."""

    grid: HalfSpaceGrid
    p: np.ndarray
    g: np.ndarray
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        g = np.asarray(self.g, dtype=float)
        if g.ndim == self.grid.d - 1:
            g = g[..., None]
        if g.shape != self.grid.hshape + (len(self.p),):
            raise ValueError(f"deviation shape {g.shape} does not match grid")
        self.g = g

    @property
    def f(self):
        return self.p + self.g

    @property
    def m(self):
        return len(self.p)

    def support_ok(self):
        xh = self.grid.horizontal_mesh()
        outside = np.max(np.abs(xh), axis=-1) >= self.grid.L / 2
        return not np.any(self.g[outside] != 0.0)

    def validate(self, manifold=None, tol=1e-10):
        if not self.support_ok():
            raise ValueError("boundary deviation not supported strictly inside [-L/2, L/2]^(d-1)")
        if manifold is not None:
            dist = manifold.dist_to_manifold(self.f)
            if np.max(dist) > tol:
                raise ValueError(f"boundary data off the target by {np.max(dist):.3g}")
        return self

    def shifted(self, shift):
        """Translate the deviation by integer cells (zero fill)."""
        g = self.g
        for ax, s in enumerate(shift):
            g = np.roll(g, s, axis=ax)
            idx = [slice(None)] * g.ndim
            if s > 0:
                idx[ax] = slice(0, s)
                g[tuple(idx)] = 0
            elif s < 0:
                idx[ax] = slice(g.shape[ax] + s, None)
                g[tuple(idx)] = 0
        return BoundaryData(self.grid, self.p, g, self.name, dict(self.params))


def constant_field(grid, value):
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return Field(grid, np.broadcast_to(value, grid.shape + value.shape).copy())


# ---------------------------------------------------------------------------
# Poisson kernel and extension
# ---------------------------------------------------------------------------


def poisson_kernel(grid, xp, xd):
    """P_{x_d}(x') = c_d x_d (|x'|^2 + x_d^2)^(-d/2)."""
    xd = np.asarray(xd, dtype=float)
    if np.any(xd <= 0):
        raise NonpositiveHeight("Poisson kernel needs x_d > 0")
    xp = np.asarray(xp, dtype=float)
    r2 = np.sum(xp * xp, axis=-1)
    d = grid.d
    return poisson_constant(d) * xd * (r2 + xd * xd) ** (-d / 2)


def _rect_antiderivative_3(x, y, t):
    return np.arctan(x * y / (t * np.sqrt(x * x + y * y + t * t))) / (2 * math.pi)


def _gauss(q):
    x, w = np.polynomial.legendre.leggauss(q)
    return x, w


def cell_weights(grid, t):
    """Integral of P_t over the cell at every offset ``-(n-1)..(n-1)``.

    Shape ``(2n-1,)*(d-1)``.  Exact for d = 3; tensor Gauss on sub-cells otherwise.
    """
    if t <= 0:
        raise NonpositiveHeight("need t > 0")
    n, h, d = grid.n, grid.h, grid.d
    off = h * np.arange(-(n - 1), n)
    if d == 3:
        e = np.concatenate([off - h / 2, [off[-1] + h / 2]])
        X, Y = np.meshgrid(e, e, indexing="ij")
        F = _rect_antiderivative_3(X, Y, t)
        return F[1:, 1:] - F[:-1, 1:] - F[1:, :-1] + F[:-1, :-1]
    sub = max(1, min(4, math.ceil(h / t)))
    q = 3
    gx, gw = _gauss(q)
    pts = ((np.arange(sub)[:, None] + (gx[None, :] + 1) / 2) / sub - 0.5).ravel() * h
    wts = np.tile(gw / 2 / sub, sub) * h
    k = d - 1
    # separable structure does not hold for P, so sum over sub-points explicitly
    out = np.zeros((2 * n - 1,) * k)
    grids = np.meshgrid(*([np.arange(len(pts))] * k), indexing="ij")
    combos = np.stack([g.ravel() for g in grids], 1)
    mesh = np.meshgrid(*([off] * k), indexing="ij")
    for c in combos:
        w = np.prod(wts[c])
        r2 = sum((mesh[a] + pts[c[a]]) ** 2 for a in range(k))
        out += w * poisson_constant(d) * t * (r2 + t * t) ** (-d / 2)
    return out


def _fft_setup(grid):
    n = grid.n
    k = grid.d - 1
    s = [sfft.next_fast_len(3 * n - 2, real=True)] * k
    return s, tuple(range(k))


def _convolve_planes(grid, g, heights):
    """Convolve ``g`` (hshape + (m,)) with cell-integrated kernels at each height."""
    n = grid.n
    s, axes = _fft_setup(grid)
    G = sfft.rfftn(g, s=s, axes=axes, workers=kernels.FFT_WORKERS)
    out = np.empty((len(heights),) + g.shape)
    sl = tuple(slice(n - 1, 2 * n - 1) for _ in axes)
    for i, t in enumerate(heights):
        W = sfft.rfftn(cell_weights(grid, t), s=s, workers=kernels.FFT_WORKERS)
        conv = sfft.irfftn(G * W[..., None], s=s, axes=axes, workers=kernels.FFT_WORKERS)
        out[i] = conv[sl]
    return out


def poisson_extend(grid, f):
    """Harmonic extension v = p + P * g sampled at the grid levels."""
    vals = np.empty(grid.shape + (f.m,))
    vals[..., 0, :] = f.f
    if np.any(f.g != 0):
        planes = _convolve_planes(grid, f.g, grid.levels)
        vals[..., 1:, :] = f.p + np.moveaxis(planes, 0, grid.d - 1)
    else:
        vals[..., 1:, :] = f.p
    return Field(grid, vals)


def poisson_extend_planes(grid, f, heights):
    """Extension evaluated on horizontal planes at arbitrary heights.

    Returns shape ``(len(heights),) + hshape + (m,)``.
    """
    heights = np.atleast_1d(np.asarray(heights, dtype=float))
    if np.any(heights <= 0):
        raise NonpositiveHeight("heights must be positive")
    return f.p + _convolve_planes(grid, f.g, heights)


def harmonicity_residual(grid, f, height, region):
    """Max of the 7-point (isotropic, spacing h) Laplacian of the extension.

    Evaluated at horizontal nodes with ``max|x_i| <= region`` on the plane
    ``x_d = height``.
    """
    h = grid.h
    planes = poisson_extend_planes(grid, f, [height - h, height, height + h])
    c = planes[1]
    lap = (planes[0] + planes[2] - 2 * c) / h**2
    k = grid.d - 1
    for ax in range(k):
        lap_ax = np.zeros_like(c)
        sl_c = [slice(1, -1) if a == ax else slice(None) for a in range(k)]
        sl_p = [slice(2, None) if a == ax else slice(None) for a in range(k)]
        sl_m = [slice(None, -2) if a == ax else slice(None) for a in range(k)]
        lap_ax[tuple(sl_c)] = (c[tuple(sl_p)] + c[tuple(sl_m)] - 2 * c[tuple(sl_c)]) / h**2
        lap = lap + lap_ax
    xh = grid.horizontal_mesh()
    mask = np.max(np.abs(xh), axis=-1) <= region + 1e-12
    return float(np.max(np.abs(lap[mask])))


# ---------------------------------------------------------------------------
# quadrature of kernel moments over the whole boundary
# ---------------------------------------------------------------------------


def _cube_points(center, half, q, dim):
    x, w = _gauss(q)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], 1) * half + center
    wg = np.meshgrid(*([w] * dim), indexing="ij")
    wts = np.prod(np.stack([g.ravel() for g in wg], 1), axis=1) * half**dim
    return pts, wts


def _shell_rule(inner, outer_factor=2.0, q=12, dim=2):
    """Gauss rule on ``[-2b, 2b]^dim \\ [-b, b]^dim`` split into cubes of side b."""
    b = inner
    idx = np.arange(-2, 2)
    grids = np.meshgrid(*([idx] * dim), indexing="ij")
    corners = np.stack([g.ravel() for g in grids], 1)
    keep = ~np.all((corners >= -1) & (corners <= 0), axis=1)
    P, W = [], []
    for c in corners[keep]:
        pts, wts = _cube_points((c + 0.5) * b, b / 2, q, dim)
        P.append(pts)
        W.append(wts)
    return np.concatenate(P), np.concatenate(W)


def exterior_integral(func, a, dim, rmax_factor=1e12, q=12):
    """Integral of ``func`` over ``R^dim \\ [-a, a]^dim`` on dyadic cube shells."""
    total = 0.0
    b = a
    while b < rmax_factor * a:
        pts, wts = _shell_rule(b, q=q, dim=dim)
        total = total + np.tensordot(wts, func(pts), axes=(0, 0))
        b *= 2
    return total


def graded_integral(func, scale, dim, q=16):
    """Integral over ``R^dim`` of a function concentrated at 0 on length ``scale``."""
    pts, wts = _cube_points(np.zeros(dim), scale, q, dim)
    return np.tensordot(wts, func(pts), axes=(0, 0)) + exterior_integral(func, scale, dim, q=q)


def kernel_mass(grid, t):
    """Total mass of P_t as seen by the extension: window cells plus exterior shells."""
    if t <= 0:
        raise NonpositiveHeight("need t > 0")
    n = grid.n
    w = cell_weights(grid, t)
    # cells of all grid nodes as seen from the centre node
    lo = (n - 1) // 2
    window = w[tuple(slice(lo, lo + n) for _ in range(grid.d - 1))]
    inside = math.fsum(np.sort(window.ravel()))
    a = grid.L + grid.h / 2 if n % 2 == 1 else grid.L + grid.h / 2
    outside = exterior_integral(lambda x: poisson_kernel(grid, x, t), a, grid.d - 1)
    return inside + float(outside)


def _grad_poisson(grid, x, t):
    """Gradient of P_t(x') in (x', x_d), shape (N, d)."""
    d = grid.d
    c = poisson_constant(d)
    r2 = np.sum(x * x, axis=-1) + t * t
    horiz = -d * c * t * x * r2[:, None] ** (-d / 2 - 1)
    vert = c * r2 ** (-d / 2) - d * c * t * t * r2 ** (-d / 2 - 1)
    return np.concatenate([horiz, vert[:, None]], axis=1)


def _folded(grid, t):
    """Horizontal components folded so odd integrands cancel exactly."""
    k = grid.d - 1

    def fn(x):
        g = _grad_poisson(grid, x, t)
        out = g.copy()
        for a in range(k):
            xr = x.copy()
            xr[:, a] = -xr[:, a]
            out[:, a] = 0.5 * (g[:, a] + _grad_poisson(grid, xr, t)[:, a])
        return out

    return fn


def cancellation_check(grid, x_d, method="auto"):
    """max_i |int grad_i P_{x_d}| over the boundary.

    ``method="grid"`` sums node values over the window (midpoint rule) and adds
    exterior shells; ``"graded"`` uses a cube centred at 0 of size x_d plus
    dyadic shells.  ``"auto"`` picks graded when x_d < 4h.
    """
    if x_d <= 0:
        raise NonpositiveHeight("need x_d > 0")
    if method == "auto":
        method = "graded" if x_d < 4 * grid.h else "grid"
    fn = _folded(grid, x_d)
    if method == "graded":
        res = graded_integral(fn, x_d, grid.d - 1)
    elif method == "grid":
        xh = grid.horizontal_mesh().reshape(-1, grid.d - 1)
        vals = fn(xh) * grid.cell_area
        # pairwise-symmetric order: sum sorted by |x| so mirror terms meet
        res = vals.sum(axis=0)
        res = res + exterior_integral(fn, grid.L + grid.h / 2, grid.d - 1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(np.max(np.abs(res)))


# ---------------------------------------------------------------------------
# Green function and potential
# ---------------------------------------------------------------------------


def green_function(grid, x, y):
    """Dirichlet Green function of the half-space by the method of images."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x[..., -1] < 0) or np.any(y[..., -1] < 0):
        raise NonpositiveHeight("points must lie in the closed upper half-space")
    r2 = np.sum((x - y) ** 2, axis=-1)
    if np.any(r2 == 0):
        raise CoincidentPoints("x and y coincide")
    ys = y.copy()
    ys[..., -1] = -ys[..., -1]
    s2 = np.sum((x - ys) ** 2, axis=-1)
    d = grid.d
    p = 1 - d / 2
    return green_constant(d) * (r2**p - s2**p)


def _vertical_band(z):
    """Coefficients of -d^2/dz^2 at nodes 1..K-1 (3-point, nonuniform)."""
    hm = z[1:-1] - z[:-2]
    hp = z[2:] - z[1:-1]
    lower = -2.0 / (hm * (hm + hp))
    upper = -2.0 / (hp * (hm + hp))
    diag = 2.0 / (hm * hp)
    return lower, diag, upper


def laplacian(grid, values):
    """Discrete Laplacian at interior nodes (zero on every boundary node)."""
    u = _vals(values)
    k = grid.d - 1
    h2 = grid.h**2
    out = np.zeros_like(u)
    inner = tuple([slice(1, -1)] * k + [slice(1, -1)])
    acc = np.zeros_like(u[inner])
    c = u[inner]
    for ax in range(k):
        plus = [slice(1, -1)] * k + [slice(1, -1)]
        minus = list(plus)
        plus[ax] = slice(2, None)
        minus[ax] = slice(None, -2)
        acc += (u[tuple(plus)] + u[tuple(minus)] - 2 * c) / h2
    lower, diag, upper = _vertical_band(grid.z)
    sh = (1,) * k + (-1,) + (1,) * (u.ndim - k - 1)
    up = [slice(1, -1)] * k + [slice(2, None)]
    dn = [slice(1, -1)] * k + [slice(None, -2)]
    acc -= lower.reshape(sh) * u[tuple(dn)] + diag.reshape(sh) * c + upper.reshape(sh) * u[tuple(up)]
    out[inner] = acc
    return out


def far_field_values(grid, F):
    """Dipole extrapolation of the potential onto the side and top boundary nodes.

    All interior sources are lumped into one vertical dipole at their
    centroid.  Returns a full array (zero at non-boundary nodes).
    """
    src = _vals(F)
    X = grid.node_coords()
    W = grid.volume_weights()
    k = grid.d - 1
    inner = tuple([slice(1, -1)] * k + [slice(1, -1)])
    y = X[inner]
    wt = (y[..., -1] * W[1:-1])[..., None] * src[inner]
    moment = wt.reshape(-1, src.shape[-1]).sum(axis=0)
    mag = np.abs(wt).sum(axis=-1).ravel()
    if mag.sum() > 0:
        centroid = (y[..., :k].reshape(-1, k) * mag[:, None]).sum(0) / mag.sum()
    else:
        centroid = np.zeros(k)
    d = grid.d
    out = np.zeros(grid.shape + (src.shape[-1],))
    bmask = boundary_mask(grid)
    bmask[..., 0] = False
    xb = X[bmask]
    rel = xb.copy()
    rel[:, :k] -= centroid
    r2 = np.sum(rel * rel, axis=1)
    amp = 2 * (d - 2) * green_constant(d) * xb[:, -1] * r2 ** (-d / 2)
    out[bmask] = amp[:, None] * moment
    return out


def _interior_sources(grid, src):
    """Source times node volume at interior nodes, zero elsewhere."""
    w = np.broadcast_to(grid.volume_weights(), grid.shape)[..., None] * src
    return _interior_only(grid, w)


def _green_kernel_3(h, n, zt, ys):
    """G on offsets (j h, l h), j = 0..n-1, l = -(n-1)..n-1, for target heights zt and source height ys."""
    j = h * np.arange(n)
    l = h * np.arange(-(n - 1), n)
    r2 = j[:, None] ** 2 + l[None, :] ** 2
    zt = np.asarray(zt)[:, None, None]
    kappa = green_constant(3)
    near = r2 + (zt - ys) ** 2
    # the coincident offset only ever meets a zero (boundary) source
    near = np.where(near == 0, np.inf, near)
    return kappa * (near**-0.5 - (r2 + (zt + ys) ** 2) ** -0.5)


def green_boundary_values(grid, F):
    """Image-Green quadrature of the interior source onto the side and top nodes.

    For d = 3 the face sums are evaluated with FFTs along each face; other
    dimensions use the direct sum.  Returns a full array (zero elsewhere).
    """
    src = _vals(F)
    c = src.shape[-1]
    Fv = _interior_sources(grid, src)
    out = np.zeros(grid.shape + (c,))
    bmask = boundary_mask(grid)
    bmask[..., 0] = False
    if grid.d != 3:
        X = grid.node_coords()
        nz = np.any(Fv != 0, axis=-1)
        vals = kernels.green_sum(
            X[bmask], X[nz], np.ones(int(nz.sum())), Fv[nz], green_constant(grid.d), grid.d, np.zeros(int(nz.sum()))
        )
        out[bmask] = vals
        return out
    n, h, K = grid.n, grid.h, grid.K
    z = grid.z
    nfft = sfft.next_fast_len(3 * n - 2, real=True)
    src_levels = [s for s in range(1, K) if np.any(Fv[:, :, s])]
    top = np.zeros((n, n, c))
    sides = np.zeros((4, n, K + 1, c))  # x1=lo, x1=hi, x2=lo, x2=hi; indexed by the free coordinate
    sl = slice(n - 1, 2 * n - 1)
    for s in src_levels:
        Fs = Fv[:, :, s]  # (n, n, c)
        # top plane: full 2-d convolution
        kern = _green_kernel_3(h, n, [z[K]], z[s])[0]  # (n, 2n-1) over |dx1| = j h
        full = np.concatenate([kern[:0:-1], kern], axis=0)  # (2n-1, 2n-1)
        Kf = sfft.rfftn(full, s=(nfft, nfft), workers=kernels.FFT_WORKERS)
        Ff = sfft.rfftn(Fs, s=(nfft, nfft), axes=(0, 1), workers=kernels.FFT_WORKERS)
        top += sfft.irfftn(Ff * Kf[..., None], s=(nfft, nfft), axes=(0, 1), workers=kernels.FFT_WORKERS)[sl, sl]
        # side faces: 1-d FFT along the face, explicit sum across it
        kt = _green_kernel_3(h, n, z[1:K], z[s])  # (K-1, n, 2n-1)
        Kt = sfft.rfft(kt, n=nfft, axis=-1, workers=kernels.FFT_WORKERS)  # (K-1, n, nf)
        for face, (axis_across, hi) in enumerate(((0, False), (0, True), (1, False), (1, True))):
            G = Fs if axis_across == 0 else np.swapaxes(Fs, 0, 1)  # (across, along, c)
            Gf = sfft.rfft(G, n=nfft, axis=1, workers=kernels.FFT_WORKERS)  # (n, nf, c)
            Kd = Kt[:, ::-1, :] if hi else Kt  # distance index: i for lo face, n-1-i for hi face
            acc = np.einsum("tjf,jfc->tfc", Kd, Gf)
            vals = sfft.irfft(acc, n=nfft, axis=1, workers=kernels.FFT_WORKERS)[:, sl, :]  # (K-1, n, c)
            sides[face, :, 1:K, :] += np.moveaxis(vals, 0, 1)
    out[:, :, K, :] = top
    out[0, :, :K, :] = sides[0, :, :K]
    out[-1, :, :K, :] = sides[1, :, :K]
    out[:, 0, :K, :] = sides[2, :, :K]
    out[:, -1, :K, :] = sides[3, :, :K]
    out[..., 0, :] = 0.0
    return out


def boundary_mask(grid):
    """True on side, top and bottom nodes."""
    k = grid.d - 1
    mask = np.zeros(grid.shape, bool)
    for ax in range(k):
        idx = [slice(None)] * (k + 1)
        idx[ax] = 0
        mask[tuple(idx)] = True
        idx[ax] = -1
        mask[tuple(idx)] = True
    mask[..., 0] = True
    mask[..., -1] = True
    return mask


def _lifted_rhs(grid, src, bvals):
    """Interior right-hand side with Dirichlet boundary values moved across."""
    k = grid.d - 1
    inner = tuple([slice(1, -1)] * k + [slice(1, -1)])
    rhs = src[inner].copy()
    h2 = grid.h**2
    for ax in range(k):
        for end, nb in ((0, 0), (-1, -1)):
            idx_b = [slice(1, -1)] * k + [slice(1, -1)]
            idx_b[ax] = nb
            idx_r = [slice(None)] * (k + 1)
            idx_r[ax] = end
            rhs[tuple(idx_r)] += bvals[tuple(idx_b)] / h2
    lower, diag, upper = _vertical_band(grid.z)
    rhs[..., -1, :] -= upper[-1] * bvals[tuple([slice(1, -1)] * k + [-1])]
    rhs[..., 0, :] -= lower[0] * bvals[tuple([slice(1, -1)] * k + [0])]
    return rhs


def _solve_fast(grid, rhs, shift=0.0):
    """Solve (-Delta + shift) x = rhs: DST horizontally, batched tridiagonal solves in z."""
    k = grid.d - 1
    N = grid.n - 2
    axes = tuple(range(k))
    R = sfft.dstn(rhs, type=1, axes=axes, norm="ortho", workers=kernels.FFT_WORKERS)
    j = np.arange(1, N + 1)
    mu1 = (2 - 2 * np.cos(j * np.pi / (N + 1))) / grid.h**2
    mu = sum(np.meshgrid(*([mu1] * k), indexing="ij"))
    lower, diag, upper = _vertical_band(grid.z)
    kz, m = R.shape[k], R.shape[-1]
    Rm = np.moveaxis(R, -1, k).reshape(-1, kz)  # (modes*m, kz)
    shifts = np.repeat(mu.ravel(), m) + shift
    sol = kernels.tridiag_shifted(lower, diag, upper, shifts, Rm)
    S = np.moveaxis(sol.reshape(R.shape[:k] + (m, kz)), k, -1)
    return sfft.idstn(S, type=1, axes=axes, norm="ortho", workers=kernels.FFT_WORKERS)


def _laplace_matrix(grid):
    """Sparse -Delta on the interior nodes (C order, vertical last)."""
    k = grid.d - 1
    N = grid.n - 2
    T = sp.diags([-np.ones(N - 1), 2 * np.ones(N), -np.ones(N - 1)], [-1, 0, 1]) / grid.h**2
    lower, diag, upper = _vertical_band(grid.z)
    Tz = sp.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1])
    Iz = sp.identity(len(diag))
    IN = sp.identity(N)
    A = None
    for ax in range(k):
        mats = [IN] * k
        mats[ax] = T
        term = mats[0]
        for mm in mats[1:]:
            term = sp.kron(term, mm)
        term = sp.kron(term, Iz)
        A = term if A is None else A + term
    eye = IN
    for _ in range(k - 1):
        eye = sp.kron(eye, IN)
    A = A + sp.kron(eye, Tz)
    return A.tocsc()


def _solve_sparse(grid, rhs, tol=1e-10):
    A = _laplace_matrix(grid)
    b = rhs.reshape(-1, rhs.shape[-1])
    lu = spla.splu(A)
    x = lu.solve(b)
    res = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
    if res > tol:
        raise SolverFailure(f"relative residual {res:.2e} exceeds {tol:.0e}")
    return x.reshape(rhs.shape)


def _element_gauss(grid, src, q=4):
    """Gauss points of every grid element with the interpolated source (cubic splines).

    Returns ``(points, weights, values)``.
    """
    d = grid.d
    k = d - 1
    gx, gw = _gauss(q)
    t = (gx + 1) / 2
    axes_nodes = [grid.coords] * k + [grid.z]
    pts_1d, w_1d = [], []
    for nodes in axes_nodes:
        a, b = nodes[:-1], nodes[1:]
        pts_1d.append((a[:, None] + (b - a)[:, None] * t[None, :]).ravel())
        w_1d.append(((b - a)[:, None] * gw[None, :] / 2).ravel())
    mesh = np.meshgrid(*[np.arange(len(p)) for p in pts_1d], indexing="ij")
    idx = [m_.ravel() for m_ in mesh]
    pts = np.stack([pts_1d[a][idx[a]] for a in range(d)], axis=1)
    wts = np.prod(np.stack([w_1d[a][idx[a]] for a in range(d)], axis=1), axis=1)
    method = "cubic" if min(len(a) for a in axes_nodes) >= 4 else "linear"
    interp = RegularGridInterpolator(tuple(axes_nodes), src, method=method)
    vals = interp(pts)
    keep = np.any(vals != 0, axis=1)
    return pts[keep], wts[keep], vals[keep]


def _solve_green(grid, src):
    """Image-Green integral of the interpolated source, Gauss points per element."""
    d = grid.d
    src = src.copy()
    src[..., 0, :] = 0.0
    ys, vol, F = _element_gauss(grid, src)
    targets = grid.node_coords()[..., 1:, :].reshape(-1, d)
    out = np.zeros(grid.shape + (src.shape[-1],))
    vals = kernels.green_sum(targets, ys, vol, F, green_constant(d), d, np.zeros(len(ys)))
    out[..., 1:, :] = vals.reshape(grid.hshape + (grid.K, src.shape[-1]))
    return out


def newton_potential(grid, F, backend="fast", boundary="green", tol=1e-10):
    """Zero-trace potential w with -Delta w = F.

    backend:
      ``"fast"``   DST + tridiagonal direct solver (default);
      ``"sparse"`` sparse LU of the assembled system (cross-check);
      ``"green"``  O(N^2) image-Green sum over the grid (oracle, small grids only).
    boundary: values on the artificial side/top boundaries; ``"green"`` sums
    the image Green function against the interior source, ``"dipole"`` uses a
    single far-field dipole, ``"zero"`` imposes 0.
    """
    src = _vals(F)
    if src.ndim == len(grid.shape):
        src = src[..., None]
    if not np.all(np.isfinite(src)):
        raise SolverFailure("non-finite source")
    if backend == "green":
        return Field(grid, _solve_green(grid, src))
    if boundary == "green":
        bvals = green_boundary_values(grid, src)
    elif boundary == "dipole":
        bvals = far_field_values(grid, src)
    elif boundary == "zero":
        bvals = np.zeros(grid.shape + (src.shape[-1],))
    else:
        raise ValueError(f"unknown boundary treatment {boundary!r}")
    rhs = _lifted_rhs(grid, src, bvals)
    if backend == "fast":
        sol = _solve_fast(grid, rhs)
    elif backend == "sparse":
        sol = _solve_sparse(grid, rhs, tol)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    out = bvals.copy()
    k = grid.d - 1
    out[tuple([slice(1, -1)] * k + [slice(1, -1)])] = sol
    out[..., 0, :] = 0.0
    if backend == "fast":
        # normwise backward error  |Ax - b| <= tol (|A||x| + |b|)
        res = -laplacian(grid, out) - _interior_only(grid, src)
        dz = np.diff(grid.z)
        norm_a = 4 * (grid.d - 1) / grid.h**2 + 4 / dz.min() ** 2
        scale = norm_a * np.max(np.abs(out)) + np.max(np.abs(rhs))
        if np.max(np.abs(res)) > tol * scale:
            raise SolverFailure("fast solver residual above tolerance")
    return Field(grid, out)


def helmholtz_solve(grid, rhs, bvals, shift):
    """Solve (-Delta + shift) w = rhs at interior nodes with w = bvals on every boundary node."""
    lifted = _lifted_rhs(grid, rhs, bvals)
    out = bvals.copy()
    k = grid.d - 1
    out[tuple([slice(1, -1)] * k + [slice(1, -1)])] = _solve_fast(grid, lifted, shift)
    return out


def _interior_only(grid, a):
    out = np.zeros_like(a)
    k = grid.d - 1
    inner = tuple([slice(1, -1)] * k + [slice(1, -1)])
    out[inner] = a[inner]
    return out


# ---------------------------------------------------------------------------
# calculus and integrals
# ---------------------------------------------------------------------------


def gradient(grid, u):
    """Per-node gradient, shape ``shape + (d, c)``.

    Central differences horizontally, three-point nonuniform differences in
    the vertical, second-order one-sided at the extremes.
    """
    vals = _vals(u)
    if vals.ndim == len(grid.shape):
        vals = vals[..., None]
    k = grid.d - 1
    comps = []
    for ax in range(k):
        comps.append(np.gradient(vals, grid.h, axis=ax, edge_order=2))
    comps.append(np.gradient(vals, grid.z, axis=k, edge_order=2))
    return np.stack(comps, axis=-2)


def grad_sq(grid, u):
    """|grad u|^2 per node (Frobenius over d x c)."""
    g = gradient(grid, u)
    return np.einsum("...jc,...jc->...", g, g)


def integrate(grid, scalar):
    """Quadrature over the truncated domain."""
    return float(np.sum(np.broadcast_to(grid.volume_weights(), grid.shape) * scalar))


def weighted_energy(grid, u):
    """int x_d |grad u|^2."""
    return integrate(grid, grid.z * grad_sq(grid, u))


def weighted_l1(grid, F):
    """int x_d |F|."""
    return integrate(grid, grid.z * np.linalg.norm(_vals(F), axis=-1))


def boundary_l2sq(grid, f):
    """int |f|^2 over the boundary grid."""
    return float(np.sum(f * f) * grid.cell_area)
