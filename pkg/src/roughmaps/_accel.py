"""Numba switch.

Set ``ROUGHMAPS_DISABLE_NUMBA=1`` before import to force the pure-numpy paths.
"""

import os

# the bundled TBB is too old for numba; avoid its warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("ROUGHMAPS_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity otherwise.

    Decorated functions always get compiled when numba is importable, so the
    jit path can be exercised in tests even when the env flag routes the
    public API to numpy.
    """
    if HAVE_NUMBA:
        return numba.njit(*args, cache=True, **kwargs)

    def wrap(fn):
        return fn

    if args and callable(args[0]):
        return args[0]
    return wrap


def set_threads(n):
    """Pin numba and FFT worker counts (deterministic reductions need a fixed count)."""
    if n is None:
        return
    n = int(n)
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    os.environ["OMP_NUM_THREADS"] = str(n)
    from . import kernels

    kernels.FFT_WORKERS = n
