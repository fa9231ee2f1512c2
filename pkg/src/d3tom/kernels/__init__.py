"""Hot numeric kernels, dispatched to numba or numpy by ``D3TOM_NUMBA``.

``matmul`` is BLAS-backed on both paths: float64 BLAS beats any loop kernel
we can write in numba, and the float32 inputs make every product exact, so
only the summation can round. ``matmul_ordered`` walks the reduction index in
strictly ascending order and is the reference the fast path is checked
against.
"""

from __future__ import annotations

import numpy as np

from .._accel import USE_NUMBA
from ..errors import InvalidInput
from . import _jit, _np

BACKEND = "numba" if USE_NUMBA else "numpy"
_impl = _jit if USE_NUMBA else _np

matmul = _np.matmul
matmul_ordered = _impl.matmul_ordered
splitmix64 = _impl.splitmix64
softmax_rows = _impl.softmax_rows
cosine_targets = _impl.cosine_targets
scatter_add_rows = _impl.scatter_add_rows


def tile_order(n_keys: int, block: int, order=None) -> np.ndarray:
    n_tiles = -(-n_keys // block)
    if order is None:
        return np.arange(n_tiles, dtype=np.int64)
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(n_tiles)):
        raise InvalidInput(f"tile order must be a permutation of range({n_tiles})")
    return order


def stream_attention(q, k, v, block, scale, order, stats=None):
    if USE_NUMBA:
        if stats is not None:
            stats["peak_tile_elems"] = max(stats.get("peak_tile_elems", 0), block)
        return _jit.stream_attention(q, k, v, block, scale, order)
    return _np.stream_attention(q, k, v, block, scale, order, stats)


def stream_decider_scores(qd, k, lo_col, hi_col, block, scale, order, stats=None):
    if USE_NUMBA:
        if stats is not None:
            stats["peak_tile_elems"] = max(stats.get("peak_tile_elems", 0), block)
        return _jit.stream_decider_scores(qd, k, lo_col, hi_col, block, scale, order)
    return _np.stream_decider_scores(qd, k, lo_col, hi_col, block, scale, order, stats)
