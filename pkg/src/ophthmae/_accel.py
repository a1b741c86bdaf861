"""Optional numba acceleration.

Set ``OPHTHMAE_DISABLE_NUMBA=1`` to force the pure-numpy code paths. The flag
is read once at import time; the benchmark script flips it per subprocess.
"""

import os

DISABLE_ENV = "OPHTHMAE_DISABLE_NUMBA"


def _flag_disabled():
    return os.environ.get(DISABLE_ENV, "").strip().lower() in ("1", "true", "yes", "on")


try:
    if _flag_disabled():
        raise ImportError("numba disabled by environment")
    from numba import njit as _numba_njit

    HAS_NUMBA = True
except ImportError:
    _numba_njit = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator.

    Functions decorated here are only dispatched to when ``HAS_NUMBA`` is true,
    so the undecorated fallback is never actually run as slow Python loops.
    """
    if HAS_NUMBA:
        kwargs.setdefault("cache", False)
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name():
    return "numba" if HAS_NUMBA else "numpy"


def set_num_threads(n):
    """Pin BLAS thread pools to ``n`` threads (the numba kernels are serial)."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))
