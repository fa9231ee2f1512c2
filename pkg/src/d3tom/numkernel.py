"""Dense float32 kernels shared by the model, the merge step and the cache.

A matrix here is a C-contiguous 2-D ``np.float32`` array. Reductions
accumulate in float64 and round once, so repeated calls on identical inputs
return identical bits.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InvalidInput


def as_matrix(x) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float32)
    if m.ndim != 2:
        raise InvalidInput(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise InvalidInput(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul(a, b)


def matmul_ordered(a, b) -> np.ndarray:
    """Product with each output summed over k = 0, 1, ... in that order."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise InvalidInput(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul_ordered(a, b)


def row_softmax(m, scale: float = 1.0) -> np.ndarray:
    """Softmax of ``scale * m`` along each row, max-subtracted first."""
    m = as_matrix(m)
    if not np.isfinite(m).all():
        raise InvalidInput("row_softmax needs finite input")
    if m.size == 0:
        return m.copy()
    return kernels.softmax_rows(m, float(scale))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise InvalidInput(f"length mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise InvalidInput("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
