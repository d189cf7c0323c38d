"""Numba switch.

Hot integer kernels are written once in the numba-compatible subset of
Python. When numba is importable and ``MINICHIC_DISABLE_NUMBA`` is unset (or
``0``), they are compiled with ``numba.njit``; otherwise they run as plain
Python and the vectorisable ones are swapped for numpy implementations.
All kernels use exact integer arithmetic, so both paths are bit-identical.
"""

import os

_DISABLED = os.environ.get("MINICHIC_DISABLE_NUMBA", "").strip() not in ("", "0")

try:  # pragma: no cover - exercised implicitly
    if _DISABLED:
        raise ImportError
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None


def njit(func):
    """Compile ``func`` with numba when enabled, else return it untouched."""
    if USE_NUMBA:
        return _numba.njit(cache=True, nogil=True)(func)
    return func


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
