"""Time the numba kernels against their numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``.  Both paths are called
directly, so the ``ROUGHMAPS_DISABLE_NUMBA`` flag does not matter here.
"""

import argparse
import time

import numpy as np

from roughmaps import kernels


def _best(fn, repeat):
    out, best = None, np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(n, rng):
    vals = rng.random((n, n))
    prefix2 = np.zeros((n, n + 1))
    np.cumsum(vals, axis=1, out=prefix2[:, 1:])
    offs2, hw2 = kernels.chord_halfwidths(n / 8 + 0.5, 1)

    vol = rng.random((n // 2, n // 2, n // 2))
    prefix3 = np.zeros(vol.shape[:2] + (vol.shape[2] + 1,))
    np.cumsum(vol, axis=2, out=prefix3[:, :, 1:])
    offs3, hw3 = kernels.chord_halfwidths(n / 16 + 0.5, 2)
    centers = np.argwhere(np.ones(vol.shape, bool))[:: max(1, vol.size // 4000)].astype(np.int64)

    f = rng.random((n, n, 3))
    offs_d = kernels.disc_offsets(n / 16 + 0.5)
    pad = np.array([0.0, 0.0, 1.0])

    n_sys, k = n * n, 24
    lower = -np.ones(k)
    diag = 2.0 * np.ones(k)
    upper = -np.ones(k)
    shift = rng.random(n_sys)
    rhs = rng.random((n_sys, k))

    pts = rng.random((600, 2)) * 20
    src = rng.random((800, 3))
    ys = rng.random((800, 3)) * 4 + 1
    xs = rng.random((600, 3)) * 4 + 1
    vols = np.full(800, 1e-2)
    self_term = np.zeros(800)

    return {
        "ball_sums_2d": (
            lambda: kernels.ball_sums_2d_nb(prefix2, offs2, hw2),
            lambda: kernels.ball_sums_2d_np(prefix2, offs2, hw2),
        ),
        "ball_sums_3d_at": (
            lambda: kernels.ball_sums_3d_at_nb(prefix3, centers, offs3, hw3),
            lambda: kernels.ball_sums_3d_at_np(prefix3, centers, offs3, hw3),
        ),
        "mean_oscillation_2d": (
            lambda: kernels.mean_oscillation_2d_nb(f, pad, offs_d),
            lambda: kernels.mean_oscillation_2d_np(f, pad, offs_d),
        ),
        "tridiag_shifted": (
            lambda: kernels.tridiag_shifted_nb(lower, diag, upper, shift, rhs),
            lambda: kernels.tridiag_shifted_np(lower, diag, upper, shift, rhs),
        ),
        "green_sum": (
            lambda: kernels.green_sum_nb(xs, ys, vols, src, 1.0, 3, self_term),
            lambda: kernels.green_sum_np(xs, ys, vols, src, 1.0, 3, self_term),
        ),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=129, help="base grid size")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'max diff':>12}")
    for name, (nb, npf) in cases(args.n, rng).items():
        nb()  # compile
        t_nb, a = _best(nb, args.repeat)
        t_np, b = _best(npf, args.repeat)
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        print(f"{name:<22}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
