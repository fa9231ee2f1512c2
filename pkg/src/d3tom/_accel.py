"""Backend switch for the hot kernels.

The numba path is used when numba imports and ``D3TOM_NUMBA`` is not set to a
false value ("0", "false", "no", "off"). With the flag off, or numba missing,
every kernel falls back to its pure-numpy twin. Both paths are always
importable so they can be compared side by side.
"""

from __future__ import annotations

import os

_FALSE = {"0", "false", "no", "off"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_requested() -> bool:
    return os.environ.get("D3TOM_NUMBA", "1").strip().lower() not in _FALSE


USE_NUMBA = HAVE_NUMBA and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
