"""Sphere-valued boundary data generators on a half-space grid."""

import numpy as np

from .geometry import cutoff
from .halfspace import BoundaryData


class UnknownGenerator(KeyError):
    pass


class AmplitudeOutOfRange(ValueError):
    pass


def _frame(grid, p=None, q=None):
    p = grid.p if p is None else np.asarray(p, dtype=float)
    p = p / np.linalg.norm(p)
    if q is None:
        k = int(np.argmin(np.abs(p)))
        q = np.zeros_like(p)
        q[k] = 1.0
    q = np.asarray(q, dtype=float)
    q = q - (q @ p) * p
    return p, q / np.linalg.norm(q)


def _geodesic(p, q, theta):
    """exp_p(theta q) for unit p perpendicular to unit q; theta has shape hshape."""
    return np.cos(theta)[..., None] * p + np.sin(theta)[..., None] * q


def _inside_window(grid, margin=0.0):
    xh = grid.horizontal_mesh()
    return np.max(np.abs(xh), axis=-1) < grid.L / 2 - margin


def smooth_bump(r, R):
    """exp(1 - 1/(1 - r^2/R^2)) on r < R, zero outside; equals 1 at r = 0."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    s = r * r / (R * R)
    inside = s < 1
    out[inside] = np.exp(1 - 1 / (1 - s[inside]))
    return out


def _data(grid, p, f, name, params):
    g = f - p
    g[~_inside_window(grid)] = 0.0
    return BoundaryData(grid, p, g, name, params)


def constant(grid, p=None):
    p, _ = _frame(grid, p)
    return BoundaryData(grid, p, np.zeros(grid.hshape + (len(p),)), "constant", {})


def geodesic_cap(grid, amplitude=0.05, radius=None, p=None, q=None, center=None):
    """f = exp_p(amplitude * b(x') q) with a smooth bump b, b(center) = 1."""
    if not 0 <= amplitude < np.pi:
        raise AmplitudeOutOfRange(f"cap amplitude {amplitude} outside [0, pi)")
    radius = 0.375 * grid.L if radius is None else radius
    center = np.zeros(grid.d - 1) if center is None else np.asarray(center, dtype=float)
    if np.max(np.abs(center)) + radius >= grid.L / 2:
        raise ValueError("cap does not fit strictly inside the support window")
    p, q = _frame(grid, p, q)
    r = np.linalg.norm(grid.horizontal_mesh() - center, axis=-1)
    f = _geodesic(p, q, amplitude * smooth_bump(r, radius))
    return _data(grid, p, f, "geodesic_cap", {"amplitude": amplitude, "radius": radius})


def step_geodesic(grid, angle=0.5, two_sided=False, p=None, q=None):
    """exp_p(angle q) on {x_1 >= 0} inside the support window, p elsewhere.

    ``two_sided`` puts exp_p(-angle q) on {x_1 < 0} instead of p.
    """
    p, q = _frame(grid, p, q)
    x1 = grid.horizontal_mesh()[..., 0]
    theta = np.where(x1 >= 0, angle, -angle if two_sided else 0.0)
    f = _geodesic(p, q, theta)
    return _data(grid, p, f, "step_geodesic", {"angle": angle, "two_sided": bool(two_sided)})


def log_spiral(grid, lam=0.5, r_in=None, r_out=None, p=None, q=None):
    """f = exp_p(lam * log|x'| * chi(|x'|) q), chi a smooth cut-off to zero before the window edge."""
    r_in = 0.25 * grid.L if r_in is None else r_in
    r_out = 0.45 * grid.L if r_out is None else r_out
    p, q = _frame(grid, p, q)
    r = np.linalg.norm(grid.horizontal_mesh(), axis=-1)
    chi, _, _ = cutoff(r, r_in, r_out)
    theta = lam * np.log(np.maximum(r, grid.h / 2)) * chi
    f = _geodesic(p, q, theta)
    return _data(grid, p, f, "log_spiral", {"lam": lam, "r_in": r_in, "r_out": r_out})


GENERATORS = {
    "constant": constant,
    "geodesic_cap": geodesic_cap,
    "step_geodesic": step_geodesic,
    "log_spiral": log_spiral,
}


def generate_boundary_data(name, params, grid):
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise UnknownGenerator(name) from None
    return gen(grid, **(params or {}))
