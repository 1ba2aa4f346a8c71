"""Acceleration layer: numba when available, plain Python otherwise.

The hot loops (SDE simulation, filter recursions, covariance and
smoother sweeps) are written once as module-level functions over numpy
arrays and scalar callbacks.  When numba is importable and the
CHEBMAP_PURE_NUMPY environment variable is unset, those functions are
compiled with ``@njit``; otherwise the interpreted originals run
unchanged.  The selection happens once at import time so that compiled
and fallback paths cannot be mixed within a process.
"""

from __future__ import annotations

import os

PURE_NUMPY_ENV = "CHEBMAP_PURE_NUMPY"

_TRUTHY = ("1", "true", "yes", "on")


def pure_numpy_requested() -> bool:
    return os.environ.get(PURE_NUMPY_ENV, "").strip().lower() in _TRUTHY


NUMBA_ENABLED = False
if not pure_numpy_requested():
    try:
        import numba as _numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False


if NUMBA_ENABLED:
    from numba import njit as _njit

    def jit_kernel(func):
        """Compile a kernel in nopython mode."""
        return _njit(cache=False)(func)

    def jit_callback(func):
        """Compile a small model callback; cacheable across processes."""
        return _njit(cache=True)(func)

else:

    def jit_kernel(func):
        return func

    def jit_callback(func):
        return func


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
