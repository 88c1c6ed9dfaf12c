"""Backend selection for the hot kernels.

Set ``TUBELETKIT_NO_NUMBA=1`` to dispatch every kernel to its pure-numpy twin.
numba stays importable either way so the benchmark can time both paths.
"""

from __future__ import annotations

import os

FLAG = "TUBELETKIT_NO_NUMBA"

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _njit = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get(FLAG, "").strip().lower() not in {
    "1",
    "true",
    "yes",
    "on",
}

BACKEND = "numba" if USE_NUMBA else "numpy"


def jit(fn):
    """``njit(cache=True)`` when numba is importable, ``None`` otherwise."""
    if _njit is None:
        return None
    return _njit(cache=True)(fn)
