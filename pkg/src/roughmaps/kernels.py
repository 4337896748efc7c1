"""Hot inner loops.

Every kernel exists twice: a ``*_nb`` version compiled with numba and a
``*_np`` version written with vectorised numpy.  The public name dispatches on
:data:`roughmaps._accel.USE_NUMBA`.  Both versions must agree to rounding; the
test-suite and ``benchmarks/bench_kernels.py`` compare them directly.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

FFT_WORKERS = None


# ---------------------------------------------------------------------------
# batched tridiagonal solve
# ---------------------------------------------------------------------------


@njit
def tridiag_shifted_nb(lower, diag, upper, shift, rhs):
    n_sys, k = rhs.shape
    out = np.empty_like(rhs)
    cp = np.empty(k)
    dp = np.empty(k)
    for s in range(n_sys):
        mu = shift[s]
        beta = diag[0] + mu
        cp[0] = upper[0] / beta
        dp[0] = rhs[s, 0] / beta
        for i in range(1, k):
            beta = diag[i] + mu - lower[i] * cp[i - 1]
            cp[i] = upper[i] / beta
            dp[i] = (rhs[s, i] - lower[i] * dp[i - 1]) / beta
        out[s, k - 1] = dp[k - 1]
        for i in range(k - 2, -1, -1):
            out[s, i] = dp[i] - cp[i] * out[s, i + 1]
    return out


def tridiag_shifted_np(lower, diag, upper, shift, rhs):
    n_sys, k = rhs.shape
    out = np.empty_like(rhs)
    cp = np.empty((n_sys, k))
    dp = np.empty((n_sys, k))
    beta = diag[0] + shift
    cp[:, 0] = upper[0] / beta
    dp[:, 0] = rhs[:, 0] / beta
    for i in range(1, k):
        beta = diag[i] + shift - lower[i] * cp[:, i - 1]
        cp[:, i] = upper[i] / beta
        dp[:, i] = (rhs[:, i] - lower[i] * dp[:, i - 1]) / beta
    out[:, k - 1] = dp[:, k - 1]
    for i in range(k - 2, -1, -1):
        out[:, i] = dp[:, i] - cp[:, i] * out[:, i + 1]
    return out


def tridiag_shifted(lower, diag, upper, shift, rhs):
    """Solve ``lower[i] x[i-1] + (diag[i] + shift[s]) x[i] + upper[i] x[i+1] = rhs[s, i]``.

    One tridiagonal system per row ``s`` of ``rhs``; the band is shared and
    only the diagonal shift varies (one shift per horizontal eigenmode).
    ``lower[0]`` and ``upper[-1]`` are ignored.
    """
    args = (
        np.ascontiguousarray(lower, dtype=float),
        np.ascontiguousarray(diag, dtype=float),
        np.ascontiguousarray(upper, dtype=float),
        np.ascontiguousarray(shift, dtype=float),
        np.ascontiguousarray(rhs, dtype=float),
    )
    if USE_NUMBA:
        return tridiag_shifted_nb(*args)
    return tridiag_shifted_np(*args)


# ---------------------------------------------------------------------------
# ball sums (cell-centre membership  |di|^2 + |dj|^2 < rho^2, rho in cells)
# ---------------------------------------------------------------------------


def chord_halfwidths(rho, ndim_rest):
    """Offsets of a discrete ball split into chords along the last axis.

    Returns ``(offsets, halfwidth)`` where ``offsets`` has shape
    ``(n_chords, ndim_rest)`` and the chord at that offset spans
    ``-halfwidth..halfwidth`` along the last axis.
    """
    r = int(math.ceil(rho))
    rng = np.arange(-r, r + 1)
    grids = np.meshgrid(*([rng] * ndim_rest), indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1) if ndim_rest else np.zeros((1, 0), int)
    q = (offs**2).sum(axis=1) if ndim_rest else np.zeros(1, int)
    rem = rho * rho - q
    keep = rem > 0
    offs, rem = offs[keep], rem[keep]
    # largest integer w with w^2 < rem
    w = np.floor(np.sqrt(rem)).astype(np.int64)
    w = np.where(w * w >= rem, w - 1, w)
    return offs.astype(np.int64), w


@njit
def ball_sums_2d_nb(prefix, offs, halfw):
    n0 = prefix.shape[0]
    n1 = prefix.shape[1] - 1
    out = np.zeros((n0, n1))
    for c0 in range(n0):
        for t in range(offs.shape[0]):
            i = c0 + offs[t, 0]
            if i < 0 or i >= n0:
                continue
            w = halfw[t]
            for c1 in range(n1):
                lo = c1 - w
                hi = c1 + w + 1
                if lo < 0:
                    lo = 0
                if hi > n1:
                    hi = n1
                if hi > lo:
                    out[c0, c1] += prefix[i, hi] - prefix[i, lo]
    return out


def ball_sums_2d_np(prefix, offs, halfw):
    n0 = prefix.shape[0]
    n1 = prefix.shape[1] - 1
    out = np.zeros((n0, n1))
    c1 = np.arange(n1)
    for t in range(offs.shape[0]):
        di = offs[t, 0]
        if abs(di) >= n0:
            continue
        w = halfw[t]
        lo = np.clip(c1 - w, 0, n1)
        hi = np.clip(c1 + w + 1, 0, n1)
        src = slice(max(di, 0), n0 + min(di, 0))
        dst = slice(max(-di, 0), n0 - max(di, 0))
        rows = prefix[src]
        out[dst] += rows[:, hi] - rows[:, lo]
    return out


def ball_sums_2d(values, rho):
    """Sum of ``values`` over every discrete disc of radius ``rho`` (cells).

    Entries outside the array count as zero.
    """
    values = np.ascontiguousarray(values, dtype=float)
    prefix = np.zeros((values.shape[0], values.shape[1] + 1))
    np.cumsum(values, axis=1, out=prefix[:, 1:])
    offs, halfw = chord_halfwidths(rho, 1)
    if USE_NUMBA:
        return ball_sums_2d_nb(prefix, offs, halfw)
    return ball_sums_2d_np(prefix, offs, halfw)


@njit
def ball_sums_3d_at_nb(prefix, centers, offs, halfw):
    n0, n1 = prefix.shape[0], prefix.shape[1]
    n2 = prefix.shape[2] - 1
    out = np.zeros(centers.shape[0])
    for c in range(centers.shape[0]):
        acc = 0.0
        for t in range(offs.shape[0]):
            i = centers[c, 0] + offs[t, 0]
            j = centers[c, 1] + offs[t, 1]
            if i < 0 or i >= n0 or j < 0 or j >= n1:
                continue
            lo = centers[c, 2] - halfw[t]
            hi = centers[c, 2] + halfw[t] + 1
            if lo < 0:
                lo = 0
            if hi > n2:
                hi = n2
            if hi > lo:
                acc += prefix[i, j, hi] - prefix[i, j, lo]
        out[c] = acc
    return out


def ball_sums_3d_at_np(prefix, centers, offs, halfw):
    n0, n1 = prefix.shape[0], prefix.shape[1]
    n2 = prefix.shape[2] - 1
    out = np.zeros(centers.shape[0])
    for t in range(offs.shape[0]):
        i = centers[:, 0] + offs[t, 0]
        j = centers[:, 1] + offs[t, 1]
        ok = (i >= 0) & (i < n0) & (j >= 0) & (j < n1)
        lo = np.clip(centers[:, 2] - halfw[t], 0, n2)
        hi = np.clip(centers[:, 2] + halfw[t] + 1, 0, n2)
        ii, jj = np.where(ok, i, 0), np.where(ok, j, 0)
        out += np.where(ok & (hi > lo), prefix[ii, jj, hi] - prefix[ii, jj, lo], 0.0)
    return out


def ball_sums_3d_at(values, centers, rho):
    """Sum of a 3-d array over discrete balls of radius ``rho`` (cells) at ``centers``."""
    values = np.ascontiguousarray(values, dtype=float)
    prefix = np.zeros(values.shape[:2] + (values.shape[2] + 1,))
    np.cumsum(values, axis=2, out=prefix[:, :, 1:])
    offs, halfw = chord_halfwidths(rho, 2)
    centers = np.ascontiguousarray(centers, dtype=np.int64)
    if USE_NUMBA:
        return ball_sums_3d_at_nb(prefix, centers, offs, halfw)
    return ball_sums_3d_at_np(prefix, centers, offs, halfw)


# ---------------------------------------------------------------------------
# mean oscillation over discrete discs (BMO)
# ---------------------------------------------------------------------------


@njit
def mean_oscillation_2d_nb(f, pad, offs):
    n0, n1, m = f.shape
    out = np.zeros((n0, n1))
    nb = offs.shape[0]
    mean = np.empty(m)
    for c0 in range(n0):
        for c1 in range(n1):
            mean[:] = 0.0
            for t in range(nb):
                i = c0 + offs[t, 0]
                j = c1 + offs[t, 1]
                inside = i >= 0 and i < n0 and j >= 0 and j < n1
                for a in range(m):
                    mean[a] += f[i, j, a] if inside else pad[a]
            for a in range(m):
                mean[a] /= nb
            acc = 0.0
            for t in range(nb):
                i = c0 + offs[t, 0]
                j = c1 + offs[t, 1]
                inside = i >= 0 and i < n0 and j >= 0 and j < n1
                s = 0.0
                for a in range(m):
                    x = (f[i, j, a] if inside else pad[a]) - mean[a]
                    s += x * x
                acc += math.sqrt(s)
            out[c0, c1] = acc / nb
    return out


def mean_oscillation_2d_np(f, pad, offs):
    n0, n1, m = f.shape
    r = int(np.abs(offs).max()) if offs.size else 0
    big = np.empty((n0 + 2 * r, n1 + 2 * r, m))
    big[:] = pad
    big[r : r + n0, r : r + n1] = f
    nb = offs.shape[0]
    mean = np.zeros((n0, n1, m))
    for di, dj in offs:
        mean += big[r + di : r + di + n0, r + dj : r + dj + n1]
    mean /= nb
    acc = np.zeros((n0, n1))
    for di, dj in offs:
        diff = big[r + di : r + di + n0, r + dj : r + dj + n1] - mean
        acc += np.sqrt(np.einsum("ija,ija->ij", diff, diff))
    return acc / nb


def disc_offsets(rho):
    """Integer offsets ``(di, dj)`` with ``di^2 + dj^2 < rho^2``, in row-major order."""
    r = int(math.ceil(rho))
    rng = np.arange(-r, r + 1)
    di, dj = np.meshgrid(rng, rng, indexing="ij")
    keep = di**2 + dj**2 < rho * rho
    return np.stack([di[keep], dj[keep]], axis=1).astype(np.int64)


def mean_oscillation_2d(f, pad, rho):
    """Mean of ``|f - f_B|`` over the disc of radius ``rho`` (cells) at every node.

    ``f`` has shape ``(n0, n1, m)``; values outside the array equal ``pad``.
    """
    f = np.ascontiguousarray(f, dtype=float)
    pad = np.ascontiguousarray(pad, dtype=float)
    offs = disc_offsets(rho)
    if USE_NUMBA:
        return mean_oscillation_2d_nb(f, pad, offs)
    return mean_oscillation_2d_np(f, pad, offs)


# ---------------------------------------------------------------------------
# brute-force oracles (small grids only)
# ---------------------------------------------------------------------------


@njit
def bmo_exhaustive_nb(pts, labels, vals, max_count):
    """sup over centres x all distinct radii of the mean oscillation.

    ``pts``: (N, 2) node coordinates in cell units; node ``j`` carries the
    value ``vals[labels[j]]``.  Every ball is ``{j : |p_j - p_c| <= delta}``
    for each distinct distance ``delta`` from the centre.  Counts per
    distinct value are accumulated shell by shell, so each ball costs
    O(number of distinct values seen).  Balls with more than ``max_count``
    nodes are skipped.
    """
    n = pts.shape[0]
    nu, m = vals.shape
    best = 0.0
    best_c = -1
    best_r2 = 0.0
    d2 = np.empty(n)
    counts = np.zeros(nu, dtype=np.int64)
    active = np.empty(nu, dtype=np.int64)
    total = np.zeros(m)
    for c in range(n):
        for j in range(n):
            dx = pts[j, 0] - pts[c, 0]
            dy = pts[j, 1] - pts[c, 1]
            d2[j] = dx * dx + dy * dy
        order = np.argsort(d2, kind="mergesort")
        counts[:] = 0
        total[:] = 0.0
        n_active = 0
        k = 0
        while k < n:
            k2 = k
            while k2 + 1 < n and d2[order[k2 + 1]] == d2[order[k]]:
                k2 += 1
            cnt = k2 + 1
            if cnt > max_count:
                break
            for t in range(k, k2 + 1):
                lab = labels[order[t]]
                if counts[lab] == 0:
                    active[n_active] = lab
                    n_active += 1
                counts[lab] += 1
                for a in range(m):
                    total[a] += vals[lab, a]
            acc = 0.0
            for q in range(n_active):
                lab = active[q]
                s = 0.0
                for a in range(m):
                    x = vals[lab, a] - total[a] / cnt
                    s += x * x
                acc += counts[lab] * math.sqrt(s)
            acc /= cnt
            if acc > best:
                best = acc
                best_c = c
                best_r2 = d2[order[k]]
            k = k2 + 1
    return best, best_c, best_r2


def bmo_exhaustive(pts, f, max_count=None):
    """Exhaustive BMO oracle over all node-centred discs of a scattered point set.

    Returns ``(sup, centre_index, squared_radius)``.  Cost grows with the
    number of distinct values in ``f``; intended for piecewise-constant data.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    vals, labels = np.unique(f, axis=0, return_inverse=True)
    labels = np.ascontiguousarray(labels.ravel(), dtype=np.int64)
    pts = np.ascontiguousarray(pts, dtype=float)
    if max_count is None:
        max_count = len(pts)
    # oracle only: always compiled when numba is importable
    return bmo_exhaustive_nb(pts, labels, np.ascontiguousarray(vals), int(max_count))


@njit
def green_sum_nb(xs, ys, vols, src, kappa, d, self_term):
    """Direct sum  w(x_i) = sum_j G(x_i, y_j) F_j vol_j  with the image Green function."""
    nx = xs.shape[0]
    ny = ys.shape[0]
    m = src.shape[1]
    out = np.zeros((nx, m))
    for i in range(nx):
        for j in range(ny):
            r2 = 0.0
            s2 = 0.0
            for a in range(d - 1):
                t = xs[i, a] - ys[j, a]
                r2 += t * t
            s2 = r2
            t = xs[i, d - 1] - ys[j, d - 1]
            r2 += t * t
            t = xs[i, d - 1] + ys[j, d - 1]
            s2 += t * t
            if r2 == 0.0:
                g = self_term[j]
            else:
                g = kappa * (r2 ** (1.0 - 0.5 * d) - s2 ** (1.0 - 0.5 * d)) * vols[j]
            for a in range(m):
                out[i, a] += g * src[j, a]
    return out


def green_sum_np(xs, ys, vols, src, kappa, d, self_term, chunk=256):
    out = np.zeros((xs.shape[0], src.shape[1]))
    p = 1.0 - 0.5 * d
    for s in range(0, xs.shape[0], chunk):
        x = xs[s : s + chunk]
        dh = x[:, None, : d - 1] - ys[None, :, : d - 1]
        h2 = (dh * dh).sum(-1)
        r2 = h2 + (x[:, None, d - 1] - ys[None, :, d - 1]) ** 2
        s2 = h2 + (x[:, None, d - 1] + ys[None, :, d - 1]) ** 2
        with np.errstate(divide="ignore"):
            g = kappa * (r2**p - s2**p) * vols[None, :]
        hit = r2 == 0.0
        if hit.any():
            g = np.where(hit, self_term[None, :], g)
        out[s : s + chunk] = g @ src
    return out


def green_sum(xs, ys, vols, src, kappa, d, self_term):
    args = tuple(np.ascontiguousarray(a, dtype=float) for a in (xs, ys, vols, src))
    st = np.ascontiguousarray(self_term, dtype=float)
    if USE_NUMBA:
        return green_sum_nb(*args, float(kappa), int(d), st)
    return green_sum_np(*args, float(kappa), int(d), st)
