"""Backend selection for the hot kernels.

Set ``PKD_NUMBA=0`` in the environment to force the pure-numpy path. When
numba is missing the numpy path is used regardless.
"""
import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the test image
    HAVE_NUMBA = False
    _njit = None

USE_NUMBA = HAVE_NUMBA and os.environ.get("PKD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged.

    The uncompiled function still works, just slowly; callers only route to it
    through :data:`USE_NUMBA` so the slow path is never hit in production.
    """
    if HAVE_NUMBA:
        return _njit(cache=True, nogil=True)(fn)
    return fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
