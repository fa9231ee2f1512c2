"""numba kernels. Each function has a numpy twin in ``_np`` with the same signature."""

import numpy as np

from .._accel import njit

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def splitmix64(state, n):
    out = np.empty(n, np.uint64)
    s = np.uint64(state)
    for i in range(n):
        s = s + GAMMA
        z = s
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
        out[i] = z ^ (z >> np.uint64(31))
    return out


@njit(cache=True)
def matmul_ordered(a, b):
    # four output rows share each load of b[p]; k is walked in ascending order
    n, k = a.shape
    m = b.shape[1]
    out = np.empty((n, m), np.float32)
    acc = np.zeros((4, m), np.float64)
    for i0 in range(0, n, 4):
        r = min(4, n - i0)
        acc[:, :] = 0.0
        for p in range(k):
            for q in range(r):
                x = np.float64(a[i0 + q, p])
                for j in range(m):
                    acc[q, j] += x * np.float64(b[p, j])
        for q in range(r):
            for j in range(m):
                out[i0 + q, j] = np.float32(acc[q, j])
    return out


@njit(cache=True)
def softmax_rows(x, scale):
    n, m = x.shape
    out = np.empty((n, m), np.float32)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = np.exp(np.float32((x[i, j] - mx) * scale))
            out[i, j] = e
            s += np.float64(e)
        inv = 1.0 / s
        for j in range(m):
            out[i, j] = np.float32(out[i, j] * inv)
    return out


@njit(cache=True)
def stream_attention(q, k, v, block, scale, order):
    n = q.shape[0]
    nk = k.shape[0]
    q64 = q.astype(np.float64)
    mx = np.full(n, -np.inf)
    denom = np.zeros(n)
    acc = np.zeros((n, v.shape[1]))
    for t in order:
        lo = t * block
        hi = min(lo + block, nk)
        s = np.dot(q64, np.ascontiguousarray(k[lo:hi].astype(np.float64).T)) * scale
        vt = v[lo:hi].astype(np.float64)
        for i in range(n):
            new_max = max(mx[i], s[i].max())
            corr = np.exp(mx[i] - new_max)
            denom[i] *= corr
            acc[i] *= corr
            for j in range(hi - lo):
                s[i, j] = np.exp(s[i, j] - new_max)
                denom[i] += s[i, j]
            mx[i] = new_max
        acc += np.dot(s, vt)
    out = np.empty(acc.shape, np.float32)
    for i in range(n):
        for c in range(acc.shape[1]):
            out[i, c] = np.float32(acc[i, c] / denom[i])
    return out


@njit(cache=True)
def stream_decider_scores(qd, k, lo_col, hi_col, block, scale, order):
    n = qd.shape[0]
    nk = k.shape[0]
    q64 = qd.astype(np.float64)
    mx = np.full(n, -np.inf)
    denom = np.zeros(n)
    # sweep 1: running max and denominator
    for t in order:
        lo = t * block
        hi = min(lo + block, nk)
        s = np.dot(q64, np.ascontiguousarray(k[lo:hi].astype(np.float64).T)) * scale
        for i in range(n):
            new_max = max(mx[i], s[i].max())
            denom[i] = denom[i] * np.exp(mx[i] - new_max) + np.exp(s[i] - new_max).sum()
            mx[i] = new_max
    # sweep 2: normalised mass on the visual columns only
    scores = np.zeros(hi_col - lo_col)
    for t in order:
        lo = max(t * block, lo_col)
        hi = min(t * block + block, nk, hi_col)
        if lo >= hi:
            continue
        s = np.dot(q64, np.ascontiguousarray(k[lo:hi].astype(np.float64).T)) * scale
        for i in range(n):
            for j in range(hi - lo):
                scores[lo - lo_col + j] += np.exp(s[i, j] - mx[i]) / denom[i]
    return scores


@njit(cache=True)
def cosine_targets(rows, kept, merged):
    d = rows.shape[1]
    km = np.zeros((kept.shape[0], d))
    mm = np.zeros((merged.shape[0], d))
    k_ok = np.zeros(kept.shape[0], np.bool_)
    m_ok = np.zeros(merged.shape[0], np.bool_)
    for dst, ok, idx in ((km, k_ok, kept), (mm, m_ok, merged)):
        for a in range(idx.shape[0]):
            acc = 0.0
            for c in range(d):
                acc += np.float64(rows[idx[a], c]) * np.float64(rows[idx[a], c])
            if acc > 0.0:
                ok[a] = True
                inv = 1.0 / np.sqrt(acc)
                for c in range(d):
                    dst[a, c] = np.float64(rows[idx[a], c]) * inv
    sims = np.dot(mm, km.T)
    target = np.empty(merged.shape[0], np.int64)
    for a in range(merged.shape[0]):
        best = -np.inf
        arg = kept[0]
        if m_ok[a]:
            for b in range(kept.shape[0]):
                # strict > keeps the lowest kept index on ties
                if k_ok[b] and sims[a, b] > best:
                    best = sims[a, b]
                    arg = kept[b]
        target[a] = arg
    return target


@njit(cache=True)
def scatter_add_rows(rows, merged, target):
    acc = rows.astype(np.float64)
    for a in range(merged.shape[0]):
        t = target[a]
        m = merged[a]
        for c in range(rows.shape[1]):
            acc[t, c] += np.float64(rows[m, c])
    return acc.astype(np.float32)
