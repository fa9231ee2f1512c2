"""Exact attention and decider scores without an N x N matrix.

Both passes walk the keys in tiles of ``key_block`` columns with an online
softmax (running max and denominator per query row), so transient storage is
bounded by ``rows * key_block``.

The decider-score pass makes two sweeps per decider row: the first settles
the row's max and denominator, the second adds the normalised weights of the
visual columns into the score vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidInput
from .numkernel import as_matrix


@dataclass(frozen=True)
class BlockSpec:
    key_block: int

    def check(self, n_keys: int) -> int:
        if not 1 <= self.key_block <= max(n_keys, 1):
            raise InvalidInput(f"key_block {self.key_block} outside [1, {n_keys}]")
        return self.key_block


def _block(block, n_keys: int) -> int:
    spec = block if isinstance(block, BlockSpec) else BlockSpec(int(block))
    return spec.check(n_keys)


def stream_attention(q, k, v, block, scale=None, tile_order=None, stats=None) -> np.ndarray:
    """``softmax(q k^T * scale) v`` computed tile by tile (default scale 1/sqrt(d))."""
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise InvalidInput(f"inconsistent shapes q{q.shape} k{k.shape} v{v.shape}")
    b = _block(block, k.shape[0])
    scale = 1.0 / np.sqrt(q.shape[1]) if scale is None else float(scale)
    order = kernels.tile_order(k.shape[0], b, tile_order)
    return kernels.stream_attention(q, k, v, b, scale, order, stats)


def stream_decider_scores(q_deciders, k, visual_range, block, scale=None, tile_order=None, stats=None):
    """Summed softmax mass each visual key receives from the decider query rows."""
    qd, k = as_matrix(q_deciders), as_matrix(k)
    if qd.shape[0] == 0:
        raise InvalidInput("decider score extraction needs at least one decider row")
    if qd.shape[1] != k.shape[1]:
        raise InvalidInput(f"inconsistent shapes q{qd.shape} k{k.shape}")
    lo, hi = (visual_range.start, visual_range.stop) if isinstance(visual_range, range) else visual_range
    if not 0 <= lo <= hi <= k.shape[0]:
        raise InvalidInput(f"visual range [{lo}, {hi}) outside the {k.shape[0]} keys")
    b = _block(block, k.shape[0])
    scale = 1.0 / np.sqrt(qd.shape[1]) if scale is None else float(scale)
    order = kernels.tile_order(k.shape[0], b, tile_order)
    return kernels.stream_decider_scores(qd, k, lo, hi, b, scale, order, stats)


def multihead_decider_scores(q, k, decider_rows, visual_range, n_heads: int, block) -> np.ndarray:
    """Decider scores of the head-averaged attention, one streaming pass per head."""
    q, k = as_matrix(q), as_matrix(k)
    rows = np.asarray(sorted(decider_rows), dtype=np.int64)
    dh = q.shape[1] // n_heads
    lo, hi = (visual_range.start, visual_range.stop) if isinstance(visual_range, range) else visual_range
    total = np.zeros(hi - lo)
    for hd in range(n_heads):
        cols = slice(hd * dh, (hd + 1) * dh)
        total += stream_decider_scores(q[rows, cols], k[:, cols], visual_range, block)
    return total / n_heads


def streaming_attention_block(h, lw, pos_codes, n_heads: int, decider_rows, visual_range, block):
    """Attention sub-block of a toy layer plus decider scores, both streamed.

    Returns ``(h_tilde, scores)``; matches the dense path of
    ``toymodel.attention_block`` followed by ``merge.importance_scores``.
    """
    from .toymodel import matmul, qkv

    q, k, v = qkv(h, lw, pos_codes)
    dh = q.shape[1] // n_heads
    outs = [
        stream_attention(q[:, hd * dh : (hd + 1) * dh], k[:, hd * dh : (hd + 1) * dh],
                         v[:, hd * dh : (hd + 1) * dh], block)
        for hd in range(n_heads)
    ]
    h_tilde = h + matmul(np.concatenate(outs, axis=1), lw.wo)
    scores = multihead_decider_scores(q, k, decider_rows, visual_range, n_heads, block)
    return h_tilde, scores
