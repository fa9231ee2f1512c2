"""Pure-numpy twins of the numba kernels in ``_jit``."""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(state, n):
    with np.errstate(over="ignore"):
        s = np.uint64(state) + _GAMMA * np.arange(1, n + 1, dtype=np.uint64)
        z = (s ^ (s >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def matmul(a, b):
    # float32 products are exact in float64, so only the sums round
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def matmul_ordered(a, b):
    acc = np.zeros((a.shape[0], b.shape[1]), np.float64)
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    for p in range(a.shape[1]):
        acc += a64[:, p : p + 1] * b64[p]
    return acc.astype(np.float32)


def softmax_rows(x, scale):
    z = (x - x.max(axis=1, keepdims=True)) * np.float32(scale)
    e = np.exp(z)
    return (e / e.sum(axis=1, dtype=np.float64, keepdims=True)).astype(np.float32)


def _tiles(nk, block, order):
    for t in order:
        lo = t * block
        yield lo, min(lo + block, nk)


def stream_attention(q, k, v, block, scale, order, stats=None):
    n = q.shape[0]
    q64 = q.astype(np.float64)
    mx = np.full((n, 1), -np.inf)
    denom = np.zeros((n, 1))
    acc = np.zeros((n, v.shape[1]))
    for lo, hi in _tiles(k.shape[0], block, order):
        s = (q64 @ k[lo:hi].astype(np.float64).T) * scale
        if stats is not None:
            stats["peak_tile_elems"] = max(stats.get("peak_tile_elems", 0), s.size)
        new_max = np.maximum(mx, s.max(axis=1, keepdims=True))
        corr = np.exp(mx - new_max)
        p = np.exp(s - new_max)
        denom = denom * corr + p.sum(axis=1, keepdims=True)
        acc = acc * corr + p @ v[lo:hi].astype(np.float64)
        mx = new_max
    return (acc / denom).astype(np.float32)


def stream_decider_scores(qd, k, lo_col, hi_col, block, scale, order, stats=None):
    n = qd.shape[0]
    nk = k.shape[0]
    q64 = qd.astype(np.float64)
    mx = np.full((n, 1), -np.inf)
    denom = np.zeros((n, 1))
    for lo, hi in _tiles(nk, block, order):
        s = (q64 @ k[lo:hi].astype(np.float64).T) * scale
        if stats is not None:
            stats["peak_tile_elems"] = max(stats.get("peak_tile_elems", 0), s.size)
        new_max = np.maximum(mx, s.max(axis=1, keepdims=True))
        denom = denom * np.exp(mx - new_max) + np.exp(s - new_max).sum(axis=1, keepdims=True)
        mx = new_max
    scores = np.zeros(hi_col - lo_col)
    for lo, hi in _tiles(nk, block, order):
        lo, hi = max(lo, lo_col), min(hi, hi_col)
        if lo >= hi:
            continue
        s = (q64 @ k[lo:hi].astype(np.float64).T) * scale
        scores[lo - lo_col : hi - lo_col] += (np.exp(s - mx) / denom).sum(axis=0)
    return scores


def cosine_targets(rows, kept, merged):
    r64 = rows.astype(np.float64)
    norms = np.sqrt((r64 * r64).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        km = r64[kept] / norms[kept][:, None]
        mm = r64[merged] / norms[merged][:, None]
    km[norms[kept] == 0.0] = 0.0
    mm[norms[merged] == 0.0] = 0.0
    sims = mm @ km.T
    sims[norms[merged] == 0.0, :] = -np.inf
    sims[:, norms[kept] == 0.0] = -np.inf
    best = np.argmax(sims, axis=1)
    # a row with no finite similarity goes to the lowest kept index
    best[~np.isfinite(sims.max(axis=1, initial=-np.inf))] = 0
    # argmax returns the first maximum, i.e. the lowest kept index on ties
    return kept[best].astype(np.int64)


def scatter_add_rows(rows, merged, target):
    out = rows.astype(np.float64)
    np.add.at(out, target, out[merged])
    return out.astype(np.float32)
