"""Kernel backend selection.

The element-level assembly and quadrature kernels exist twice: a numba
``@njit`` version (default) and a vectorized pure-numpy version. Set the
environment variable ``PFTOPT_FORCE_NUMPY=1`` before import to select the
numpy path, e.g. on platforms where numba is unavailable or for debugging.
"""

import os

FORCE_NUMPY = os.environ.get("PFTOPT_FORCE_NUMPY", "0") not in ("0", "", "false", "False")

if not FORCE_NUMPY:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False

USING_NUMBA = HAVE_NUMBA and not FORCE_NUMPY


def jit(func):
    """Compile ``func`` with numba when the numba backend is active."""
    if USING_NUMBA:
        return njit(func, cache=True)
    return func
