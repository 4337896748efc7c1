"""Target manifolds embedded in R^m.

The unit sphere is handled in closed form.  Implicit hypersurfaces
``{phi = 0}`` use a damped Newton solve for the closest point and finite
differences for second derivatives.

All point-wise operations accept a single point of shape ``(m,)`` or a stack of
shape ``(..., m)`` and broadcast over the leading axes.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class OutsideTube(ValueError):
    """Point lies at distance >= tube radius from the manifold."""


class NewtonDivergence(RuntimeError):
    """Closest-point Newton iteration did not converge."""


# ---------------------------------------------------------------------------
# smooth cut-off with analytic derivatives
# ---------------------------------------------------------------------------


def _psi(t):
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smooth_step(t):
    """C^inf step, 0 for t <= 0 and 1 for t >= 1, with first two derivatives."""
    t = np.asarray(t, dtype=float)
    a, b = _psi(t), _psi(1.0 - t)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_t = np.where(t > 0, 1.0 / np.where(t > 0, t, 1.0), 0.0)
        inv_s = np.where(t < 1, 1.0 / np.where(t < 1, 1.0 - t, 1.0), 0.0)
    da = a * inv_t**2
    db = -b * inv_s**2
    d2a = a * (inv_t**4 - 2 * inv_t**3)
    d2b = b * (inv_s**4 - 2 * inv_s**3)
    den = a + b
    num1 = da * b - a * db
    s = a / den
    s1 = num1 / den**2
    num2 = d2a * b - a * d2b
    s2 = (num2 * den - 2 * num1 * (da + db)) / den**3
    return s, s1, s2


def cutoff(delta, inner, outer):
    """chi(delta) = 1 on [0, inner], 0 beyond outer, and its derivatives."""
    w = outer - inner
    s, s1, s2 = smooth_step((np.asarray(delta, dtype=float) - inner) / w)
    return 1.0 - s, -s1 / w, -s2 / w**2


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetManifold:
    """A closed hypersurface N of R^m plus the data for extending its projection.

    Parameters
    ----------
    m : ambient dimension.
    kind : ``"sphere"`` or ``"implicit"``.
    tube_radius : radius rho of the neighbourhood on which the projection is used.
    cutoff_inner, cutoff_outer : blend radii, ``0 < inner < outer <= rho``.
    level, level_grad : level function and its gradient (implicit only).
    newton_tol, newton_maxit : closest-point solver settings.
    """

    m: int = 3
    kind: str = "sphere"
    tube_radius: float = 0.25
    cutoff_inner: float = 0.125
    cutoff_outer: float = 0.25
    level: Optional[Callable] = field(default=None, compare=False)
    level_grad: Optional[Callable] = field(default=None, compare=False)
    newton_tol: float = 1e-12
    newton_maxit: int = 50
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("ambient dimension must be >= 2")
        if not 0 < self.cutoff_inner < self.cutoff_outer <= self.tube_radius:
            raise ValueError("need 0 < cutoff_inner < cutoff_outer <= tube_radius")
        if self.kind == "sphere":
            if self.tube_radius >= 1:
                raise ValueError("sphere tube radius must be < 1")
        elif self.kind == "implicit":
            if self.level is None or self.level_grad is None:
                raise ValueError("implicit target needs level and level_grad")
        else:
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def sphere(cls, m=3, **kw):
        return cls(m=m, kind="sphere", **kw)

    @classmethod
    def implicit(cls, level, level_grad, m=3, **kw):
        return cls(m=m, kind="implicit", level=level, level_grad=level_grad, **kw)

    # -- projection ---------------------------------------------------------

    def _hess_level(self, q):
        """Central-difference Hessian of the level function, shape (k, m, m)."""
        eps = 1e-6
        H = np.empty((len(q), self.m, self.m))
        for a in range(self.m):
            e = np.zeros(self.m)
            e[a] = eps
            H[:, :, a] = (self.level_grad(q + e) - self.level_grad(q - e)) / (2 * eps)
        return 0.5 * (H + H.transpose(0, 2, 1))

    def _newton(self, z):
        """Closest point on {phi=0} for a stack of points; returns (q, converged).

        Damped Newton on q - z + lam grad(q) = 0, phi(q) = 0.
        """
        z = np.atleast_2d(z)
        k, m = z.shape
        g = self.level_grad(z)
        # first-order guess: one Gauss-Newton step along grad phi(z)
        lam = self.level(z) / np.einsum("ij,ij->i", g, g)
        q = z - lam[:, None] * g
        ok = np.zeros(k, bool)

        def resid(q, lam):
            return np.concatenate([q - z + lam[:, None] * self.level_grad(q), self.level(q)[:, None]], axis=1)

        r = resid(q, lam)
        for _ in range(self.newton_maxit):
            J = np.zeros((k, m + 1, m + 1))
            J[:, :m, :m] = np.eye(m) + lam[:, None, None] * self._hess_level(q)
            gq = self.level_grad(q)
            J[:, :m, m] = gq
            J[:, m, :m] = gq
            try:
                step = np.linalg.solve(J, -r[..., None])[..., 0]
            except np.linalg.LinAlgError:
                break
            t = np.ones(k)
            rn0 = np.linalg.norm(r, axis=1)
            for _ in range(20):
                q_t = q + t[:, None] * step[:, :m]
                lam_t = lam + t * step[:, m]
                r_t = resid(q_t, lam_t)
                worse = np.linalg.norm(r_t, axis=1) > (1 - 1e-4 * t) * rn0
                worse &= rn0 > self.newton_tol
                if not worse.any():
                    break
                t = np.where(worse, 0.5 * t, t)
            q, lam, r = q_t, lam_t, r_t
            ok = np.linalg.norm(r, axis=1) <= self.newton_tol
            if ok.all():
                break
        return q, ok

    def project(self, z):
        """Nearest point on N; raises :class:`OutsideTube` outside the tube."""
        z = np.asarray(z, dtype=float)
        dist = self.dist_to_manifold(z)
        if np.any(dist >= self.tube_radius):
            raise OutsideTube(f"point at distance {np.max(dist):.3g} >= rho = {self.tube_radius}")
        return self._project_unchecked(z)

    def _project_unchecked(self, z):
        if self.kind == "sphere":
            r = np.linalg.norm(z, axis=-1, keepdims=True)
            return z / r
        flat = z.reshape(-1, self.m)
        q, ok = self._newton(flat)
        if not ok.all():
            raise NewtonDivergence("closest-point iteration failed")
        return q.reshape(z.shape)

    def dist_to_manifold(self, z):
        """Distance to N; for implicit targets +inf outside the tube."""
        z = np.asarray(z, dtype=float)
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(z, axis=-1) - 1.0)
        flat = z.reshape(-1, self.m)
        out = np.full(len(flat), np.inf)
        # cheap pre-screen: first-order distance estimate |phi|/|grad phi|
        est = np.abs(self.level(flat)) / np.linalg.norm(self.level_grad(flat), axis=1)
        near = est < 2 * self.tube_radius
        if near.any():
            q, ok = self._newton(flat[near])
            d = np.linalg.norm(flat[near] - q, axis=1)
            d[~ok] = np.inf
            d[d >= self.tube_radius] = np.inf
            out[near] = d
        return out.reshape(z.shape[:-1])

    def upsilon(self, z):
        """Defect map z - P_N(z)."""
        z = np.asarray(z, dtype=float)
        return z - self.project(z)

    # -- smooth extension ---------------------------------------------------

    def _sphere_profile(self, r):
        """Radial profile s(r) with P(z) = s(|z|) z/|z|, and s', s''."""
        r = np.asarray(r, dtype=float)
        s = np.ones_like(r)
        s1 = np.zeros_like(r)
        s2 = np.zeros_like(r)
        inside = r < 1.0
        delta = 1.0 - r[inside]
        chi, chi1, chi2 = cutoff(delta, self.cutoff_inner, self.cutoff_outer)
        s[inside] = r[inside] + delta * chi
        s1[inside] = 1.0 - (chi + delta * chi1)
        s2[inside] = 2 * chi1 + delta * chi2
        return s, s1, s2

    def extended_projection(self, z):
        """Globally smooth map agreeing with P_N within ``cutoff_inner`` of N."""
        z = np.asarray(z, dtype=float)
        if self.kind == "sphere":
            r = np.linalg.norm(z, axis=-1)
            s, _, _ = self._sphere_profile(r)
            safe = np.where(r > 0, r, 1.0)
            g = np.where(r > 0, s / safe, 1.0)
            return g[..., None] * z
        flat = z.reshape(-1, self.m)
        dist = self.dist_to_manifold(flat)
        out = flat.copy()
        near = np.isfinite(dist)
        if near.any():
            chi, _, _ = cutoff(dist[near], self.cutoff_inner, self.cutoff_outer)
            q, _ = self._newton(flat[near])
            out[near] = flat[near] + chi[:, None] * (q - flat[near])
        return out.reshape(z.shape)

    def gamma_tilde(self, z, V, W):
        """Extended second fundamental form, minus the Hessian of the extended projection."""
        z, V, W = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (z, V, W)))
        if self.kind == "sphere":
            return -self._sphere_hessian(z, V, W)
        eps = self.fd_step
        P = self.extended_projection
        # polarised second difference  D^2 P (V, W)
        h = (
            P(z + eps * (V + W)) - P(z + eps * (V - W)) - P(z - eps * (V - W)) + P(z - eps * (V + W))
        ) / (4 * eps * eps)
        return -h

    def _sphere_hessian(self, z, V, W):
        r = np.linalg.norm(z, axis=-1)
        s, s1, s2 = self._sphere_profile(r)
        safe = np.where(r > 0, r, 1.0)
        g1 = s1 / safe - s / safe**2
        g2 = s2 / safe - 2 * s1 / safe**2 + 2 * s / safe**3
        g1 = np.where(r > 0, g1, 0.0)[..., None]
        g2 = np.where(r > 0, g2, 0.0)[..., None]
        n = z / safe[..., None]
        nV = np.einsum("...i,...i->...", n, V)[..., None]
        nW = np.einsum("...i,...i->...", n, W)[..., None]
        VW = np.einsum("...i,...i->...", V, W)[..., None]
        return g1 * (nW * V + nV * W + (VW - nV * nW) * n) + g2 * nV * nW * z

    def gamma_tilde_sum(self, u, grads):
        """sum_j Gamma~(u)(d_j u, d_j u) for fields.

        ``u``: (..., m); ``grads``: (..., d, m).
        """
        if self.kind == "sphere":
            # closed form: expand the Hessian contraction over j once
            r = np.linalg.norm(u, axis=-1)
            s, s1, s2 = self._sphere_profile(r)
            safe = np.where(r > 0, r, 1.0)
            g1 = np.where(r > 0, s1 / safe - s / safe**2, 0.0)[..., None]
            g2 = np.where(r > 0, s2 / safe - 2 * s1 / safe**2 + 2 * s / safe**3, 0.0)[..., None]
            n = u / safe[..., None]
            nV = np.einsum("...m,...jm->...j", n, grads)
            sq = np.einsum("...jm,...jm->...", grads, grads)[..., None]
            nV2 = (nV * nV).sum(-1)[..., None]
            lin = np.einsum("...j,...jm->...m", nV, grads)
            hess = g1 * (2 * lin + (sq - nV2) * n) + g2 * nV2 * u
            return -hess
        out = np.zeros(np.broadcast_shapes(u.shape, grads.shape[:-2] + (u.shape[-1],)))
        for j in range(grads.shape[-2]):
            out = out + self.gamma_tilde(u, grads[..., j, :], grads[..., j, :])
        return out

    # -- tangent spaces and curvature ---------------------------------------

    def normal(self, q):
        """Unit normal at points of N."""
        q = np.asarray(q, dtype=float)
        if self.kind == "sphere":
            return q / np.linalg.norm(q, axis=-1, keepdims=True)
        g = self.level_grad(q.reshape(-1, self.m)).reshape(q.shape)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def tangent_projector(self, q):
        """Orthogonal projector onto T_qN, shape (..., m, m)."""
        nu = self.normal(q)
        eye = np.eye(self.m)
        return eye - nu[..., :, None] * nu[..., None, :]

    def tangent_basis(self, q):
        """Orthonormal basis of T_qN as rows, shape (..., m-1, m)."""
        nu = self.normal(q)
        flat = nu.reshape(-1, self.m)
        out = np.empty((len(flat), self.m - 1, self.m))
        for i, n in enumerate(flat):
            # Householder reflector mapping e_k to n; its other columns span n^perp
            k = int(np.argmax(np.abs(n)))
            e = np.zeros(self.m)
            e[k] = 1.0
            w = n - e if n[k] < 0 else n + e
            H = np.eye(self.m) - 2 * np.outer(w, w) / (w @ w)
            cols = [H[:, c] for c in range(self.m) if c != k]
            out[i] = np.array(cols)
        return out.reshape(nu.shape[:-1] + (self.m - 1, self.m))


def curvature_geo(M, v, grads, phi):
    """sum_j R(phi, d_j v) d_j v in the positive-curvature convention.

    Gauss equation with the second fundamental form taken from
    ``M.gamma_tilde``: R(X, Y)Y = A_{II(Y,Y)} X - A_{II(X,Y)} Y.  Slow,
    point-by-point; used for non-sphere targets and as a cross-check.
    """
    v = np.asarray(v, dtype=float)
    E = M.tangent_basis(v)  # (..., m-1, m)
    T = M.tangent_projector(v)
    out = np.zeros(np.broadcast_shapes(v.shape, phi.shape))
    phi_t = np.einsum("...ab,...b->...a", T, phi)
    for j in range(grads.shape[-2]):
        Y = np.einsum("...ab,...b->...a", T, grads[..., j, :])
        IIyy = M.gamma_tilde(v, Y, Y)
        IIxy = M.gamma_tilde(v, phi_t, Y)
        # A_nu X = sum_a <II(X, e_a), nu> e_a
        for a in range(E.shape[-2]):
            ea = E[..., a, :]
            c1 = np.einsum("...i,...i->...", M.gamma_tilde(v, phi_t, ea), IIyy)
            c2 = np.einsum("...i,...i->...", M.gamma_tilde(v, Y, ea), IIxy)
            out = out + (c1 - c2)[..., None] * ea
    return out


def curvature_term(M, v, grads, phi, flip_curvature=False):
    """Curvature coupling sum_j R^N(phi, d_j v) d_j v entering the stability form.

    The default sign makes ``int |grad phi|^2 + <curvature_term, phi>`` the
    second variation of the energy (for the sphere the integrand is
    ``-sum_j (|d_j v|^2 |phi|^2 - <phi, d_j v>^2)``).  ``flip_curvature=True``
    flips it.  ``phi`` is projected onto T_vN first and the result is tangent.

    Shapes: ``v`` (..., m), ``grads`` (..., d, m), ``phi`` (..., m).
    """
    v = np.asarray(v, dtype=float)
    grads = np.asarray(grads, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if M.kind == "sphere":
        n = v / np.linalg.norm(v, axis=-1, keepdims=True)
        phi_t = phi - np.einsum("...i,...i->...", phi, n)[..., None] * n
        g_t = grads - np.einsum("...jm,...m->...j", grads, n)[..., None] * n[..., None, :]
        sq = np.einsum("...jm,...jm->...", g_t, g_t)[..., None]
        proj = np.einsum("...jm,...m->...j", g_t, phi_t)
        geo = sq * phi_t - np.einsum("...j,...jm->...m", proj, g_t)
    else:
        geo = curvature_geo(M, v, grads, phi)
    return geo if flip_curvature else -geo
