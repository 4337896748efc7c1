"""Scale-invariant norms of half-space fields and the BMO norm of boundary data.

Suprema over balls are sampled: centres are the horizontal grid nodes and
radii are the grid levels.  A node ``y'`` belongs to ``B_r(x')`` iff
``|y' - x'| < r + h/2``.  The Carleson cylinder over ``B_r(x')`` is
``B_r(x') x (0, r)``; its vertical integral uses the trapezoid rule on the
grid levels (linear interpolation of the integrand for off-grid radii).
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .halfspace import Field, grad_sq


@dataclass
class NormReport:
    sup_norm: float
    weighted_grad_sup: float
    carleson_energy: float
    total: float = None
    argmax: dict = field(default_factory=dict)
    clipped: bool = False

    def __post_init__(self):
        if self.total is None:
            self.total = self.sup_norm + self.weighted_grad_sup + self.carleson_energy

    @property
    def seminorm(self):
        return self.weighted_grad_sup + self.carleson_energy

    def as_dict(self):
        return asdict(self)


def _ball_sums(values, rho):
    """Sum of ``values`` (horizontal array) over every discrete ball of radius ``rho`` cells."""
    if values.ndim == 2:
        return kernels.ball_sums_2d(values, rho)
    if values.ndim == 1:
        c = np.concatenate([[0.0], np.cumsum(values)])
        w = int(np.ceil(rho)) - 1  # largest |di| with |di| < rho
        i = np.arange(len(values))
        return c[np.clip(i + w + 1, 0, len(values))] - c[np.clip(i - w, 0, len(values))]
    # generic: chords along the last axis, shifted prefix sums
    k = values.ndim
    prefix = np.concatenate([np.zeros(values.shape[:-1] + (1,)), np.cumsum(values, axis=-1)], axis=-1)
    offs, halfw = kernels.chord_halfwidths(rho, k - 1)
    n_last = values.shape[-1]
    idx = np.arange(n_last)
    out = np.zeros(values.shape)
    for o, w in zip(offs, halfw):
        src, dst = [], []
        for ax, s in enumerate(o):
            n = values.shape[ax]
            src.append(slice(max(s, 0), n + min(s, 0)))
            dst.append(slice(max(-s, 0), n - max(s, 0)))
        rows = prefix[tuple(src)]
        lo = np.clip(idx - w, 0, n_last)
        hi = np.clip(idx + w + 1, 0, n_last)
        out[tuple(dst)] += rows[..., hi] - rows[..., lo]
    return out


def _fit_mask(grid, r):
    """Horizontal nodes whose radius-r ball lies inside the window."""
    xh = grid.horizontal_mesh()
    return np.max(np.abs(xh), axis=-1) + r <= grid.L + 1e-12


def _radii(grid, density):
    """Sampled radii: the levels, refined geometrically by ``density``."""
    lev = grid.levels
    if density == 1:
        return lev
    q = 1.0 / grid.sigma
    k = np.arange((len(lev) - 1) * density + 1)
    return lev[0] * q ** (k / density)


def _cylinder_integrals(grid, q, r):
    """int_0^r q(., y_d) dy_d at every horizontal node (trapezoid, linear between levels)."""
    z = grid.z
    dz = np.diff(z)
    cum = np.concatenate([np.zeros(q.shape[:-1] + (1,)), np.cumsum(0.5 * dz * (q[..., 1:] + q[..., :-1]), axis=-1)], axis=-1)
    k = int(np.searchsorted(z, r, side="right") - 1)
    k = min(k, len(z) - 1)
    if np.isclose(z[k], r, rtol=1e-13, atol=0) or k == len(z) - 1:
        return cum[..., k]
    t = (r - z[k]) / dz[k]
    qr = q[..., k] + t * (q[..., k + 1] - q[..., k])
    return cum[..., k] + 0.5 * (r - z[k]) * (q[..., k] + qr)


def carleson_sup(grid, q, density=1, power=1.0):
    """max over sampled balls of (r^(1-d) int_{cylinder} q)^power, with its maximiser."""
    best, arg = 0.0, None
    h = grid.h
    for r in _radii(grid, density):
        fit = _fit_mask(grid, r)
        if not fit.any():
            continue
        I = _cylinder_integrals(grid, q, r) * grid.cell_area
        sums = _ball_sums(I, r / h + 0.5)
        vals = np.where(fit, sums, -np.inf) * r ** (1 - grid.d)
        i = int(np.argmax(vals))
        if vals.flat[i] > best:
            best = float(vals.flat[i])
            arg = {"center": grid.horizontal_mesh().reshape(-1, grid.d - 1)[i].tolist(), "radius": float(r)}
    return max(best, 0.0) ** power, arg


def x_norm(u, density=1):
    """The X-norm: sup|u| + sup_x x_d |grad u| + sqrt of the Carleson energy."""
    grid = u.grid
    vals = u.values
    mag = np.linalg.norm(vals, axis=-1)
    i = int(np.argmax(mag))
    sup = float(mag.flat[i])
    g2 = grad_sq(grid, u)
    wg = grid.z * np.sqrt(g2)
    j = int(np.argmax(wg))
    wsup = float(wg.flat[j])
    car, carg = carleson_sup(grid, grid.z * g2, density=density, power=0.5)
    X = grid.node_coords().reshape(-1, grid.d)
    argmax = {"sup": X[i].tolist(), "weighted_grad": X[j].tolist(), "carleson": carg}
    return NormReport(sup, wsup, float(car), argmax=argmax)


def y_norm(F, detail=False):
    """sup x_d^2 |F| + max over balls of r^(1-d) int_{cylinder} y_d |F|."""
    grid = F.grid
    mag = np.linalg.norm(F.values, axis=-1)
    s = float(np.max(grid.z**2 * mag))
    c, arg = carleson_sup(grid, grid.z * mag)
    if detail:
        return {"sup_term": s, "carleson_term": float(c), "total": s + float(c), "argmax": arg}
    return s + float(c)


def carleson_exhaustive(u, radii=None, q=None):
    """Brute-force Carleson term: every centre, every radius, explicit masks."""
    grid = u.grid
    if q is None:
        q = grid.z * grad_sq(grid, u)
    if radii is None:
        radii = grid.levels
    xh = grid.horizontal_mesh()
    flat = xh.reshape(-1, grid.d - 1)
    best = 0.0
    for r in radii:
        I = (_cylinder_integrals(grid, q, r) * grid.cell_area).ravel()
        fit = (np.max(np.abs(flat), axis=1) + r <= grid.L + 1e-12)
        for c in np.nonzero(fit)[0]:
            dist = np.sqrt(np.sum((flat - flat[c]) ** 2, axis=1))
            inside = dist < r + grid.h / 2
            val = r ** (1 - grid.d) * I[inside].sum()
            best = max(best, val)
    return float(np.sqrt(best))


# ---------------------------------------------------------------------------
# BMO
# ---------------------------------------------------------------------------


def bmo_radii(grid, ratio=np.sqrt(2.0), rmax=None):
    """Geometric radii from h up to ``rmax`` (default L)."""
    rmax = grid.L if rmax is None else rmax
    k = int(np.floor(np.log(rmax / grid.h) / np.log(ratio) + 1e-9))
    return grid.h * ratio ** np.arange(k + 1)


def bmo_norm(f, radii=None, detail=False):
    """sup over sampled discs of the mean of |f - f_B|; values beyond the grid equal p."""
    grid = f.grid
    if grid.d != 3:
        raise NotImplementedError("BMO sampling is implemented for 2-d boundaries")
    if radii is None:
        radii = bmo_radii(grid)
    if not np.any(f.g):
        return (0.0, {}) if detail else 0.0
    best, arg = 0.0, {}
    for r in radii:
        osc = kernels.mean_oscillation_2d(f.f, f.p, r / grid.h + 0.5)
        i = int(np.argmax(osc))
        if osc.flat[i] > best:
            best = float(osc.flat[i])
            arg = {"center": grid.horizontal_mesh().reshape(-1, 2)[i].tolist(), "radius": float(r)}
    return (best, arg) if detail else best


def bmo_oracle(f):
    """Exhaustive small-grid BMO: every node centre, every distinct radius, grid nodes only."""
    grid = f.grid
    pts = grid.horizontal_mesh().reshape(-1, grid.d - 1) / grid.h
    vals = f.f.reshape(-1, f.m)
    best, c, r2 = kernels.bmo_exhaustive(pts, vals)
    return float(best)
