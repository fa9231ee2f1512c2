"""Acceptance criteria 1-10, one check per criterion.

Each ``criterion_N`` returns ``(passed, detail)``. Under pytest every check is
a test and a PASS/FAIL line per criterion is printed in the terminal summary;
``python tests/test_acceptance.py`` prints the same lines directly. Criterion
9 times full decodes of the default toy model and takes several minutes.
"""

from __future__ import annotations

import math
import statistics
import sys
import time
from fractions import Fraction
from unittest import mock

import numpy as np
import pytest

from d3tom import diffusion, kvcache
from d3tom.costmodel import (LAVIDA_8B, baseline_flops, d3tom_flops, delta_fraction, fastv_flops, method_flops,
                             pdrop_flops, retain_to_alpha, visionzip_flops)
from d3tom.diffusion import reveal_count, run_decode
from d3tom.merge import MergeSchedule, importance_scores, partition
from d3tom.streamscore import stream_attention, stream_decider_scores
from d3tom.toymodel import ModelConfig, init_weights

RESULTS: dict = {}
TERA = Fraction(10**12)
RETAIN = ("50", "33.3", "25", "16.7", "10")

# Abs. TFLOPs per retention level, in RETAIN order
COST_TABLE = {
    "d3tom": (159.42, 125.73, 109.12, 92.61, 79.35),
    "d3tom-t": (160.03, 125.99, 109.27, 92.68, 79.37),
    "fastv": (158.10, 124.01, 107.22, 90.54, 77.14),
    "pdrop": (187.18, 137.13, 119.57, 105.87, 97.16),
    "visionzip": (143.57, 104.74, 85.62, 66.62, 51.36),
}
SWEEP_TABLE = {
    Fraction(3, 4): (93.05, 109.12, 130.55, 151.98, 173.41),
    Fraction(9, 10): (60.16, 79.35, 104.93, 130.51, 156.09),
}
SWEEP_L_STARS = (0, 3, 7, 11, 15)


def tera(x) -> float:
    return float(Fraction(x) / TERA)


def rel_err(got, want) -> float:
    return abs(got - want) / abs(want)


def tiny_config(rng, **fixed) -> ModelConfig:
    n_heads = int(rng.choice([1, 2, 4]))
    n_layers = int(rng.integers(2, 5))
    cfg = dict(vocab_size=int(rng.integers(16, 80)), d_model=8 * n_heads * int(rng.integers(1, 3)),
               d_ff=int(rng.integers(16, 64)), n_layers=n_layers, n_heads=n_heads,
               n_visual=int(rng.integers(8, 80)), n_prompt=int(rng.integers(0, 8)),
               n_output=int(rng.integers(1, 12)), n_steps=int(rng.integers(1, 8)),
               merge_layer=int(rng.integers(0, n_layers)), seed=int(rng.integers(0, 2**63)),
               d_visual=int(rng.integers(4, 24)))
    cfg.update(fixed)
    return ModelConfig(**cfg)


# --- criteria ------------------------------------------------------------------

def criterion_1():
    start = time.perf_counter()
    worst, where = 0.0, ""
    base = tera(baseline_flops(LAVIDA_8B))
    errs = [(rel_err(base, 262.60), "baseline")]
    for method, values in COST_TABLE.items():
        for pct, want in zip(RETAIN, values):
            got = tera(method_flops(LAVIDA_8B, method, retain_to_alpha(pct)))
            errs.append((rel_err(got, want), f"{method}@{pct}%"))
    worst, where = max(errs)
    elapsed = time.perf_counter() - start
    return worst <= 5e-3 and elapsed < 1.0, f"{len(errs)} cells, worst {worst:.3%} ({where}), {elapsed * 1e3:.0f} ms"


def criterion_2():
    start = time.perf_counter()
    errs = []
    for alpha, values in SWEEP_TABLE.items():
        for ls, want in zip(SWEEP_L_STARS, values):
            got = tera(d3tom_flops(LAVIDA_8B.with_(l_star=ls), alpha))
            errs.append((rel_err(got, want), f"l*={ls} a={float(alpha)}"))
    worst, where = max(errs)
    elapsed = time.perf_counter() - start
    return worst <= 5e-3 and elapsed < 1.0, f"{len(errs)} cells, worst {worst:.3%} ({where}), {elapsed * 1e3:.0f} ms"


def criterion_3():
    grid = [Fraction(i, 100) for i in range(100)]
    worst = Fraction(0)
    for i, lo in enumerate(grid):
        for hi in grid[i:]:
            worst = max(worst, delta_fraction(LAVIDA_8B, MergeSchedule.linear(lo, hi)))
    gaps = []
    for pct in RETAIN:
        a = retain_to_alpha(pct)
        gaps.append(rel_err(tera(method_flops(LAVIDA_8B, "d3tom-t", a)), tera(method_flops(LAVIDA_8B, "d3tom", a))))
    ok = worst < Fraction(1, 100) and max(gaps) <= 1e-3
    return ok, f"max delta fraction {float(worst):.4%} over {len(grid) * (len(grid) + 1) // 2} ramps; " \
               f"d3tom-t vs d3tom worst {max(gaps):.3%}"


def criterion_4():
    rng = np.random.default_rng(4)
    mismatches = []
    for trial in range(20):
        cfg = tiny_config(rng)
        w = init_weights(cfg)
        base, _ = run_decode(cfg, w)
        for strategy, kw in (("d3tom_constant", {"alpha": 0.0}), ("d3tom_linear", {"alpha_min": 0.0, "alpha_max": 0.0})):
            tokens, _ = run_decode(cfg, w, strategy, **kw)
            if not np.array_equal(tokens, base):
                mismatches.append((trial, strategy))
    return not mismatches, f"20 configs x 2 zero schedules, mismatches: {mismatches or 'none'}"


def _conservation_hidden(cfg, w, strategy, kw, worst):
    real = diffusion.step_merge
    vis = cfg.n_visual

    def checked(hidden, attn, rows, schedule, s, config):
        out, surv, row = real(hidden, attn, rows, schedule, s, config)
        before = hidden[:vis].astype(np.float64).sum(axis=0)
        after = out[: row.n_kept if row.n_merged else vis].astype(np.float64).sum(axis=0)
        worst.append(float(np.abs(after - before).max() / max(np.abs(before).max(), 1e-12)))
        return out, surv, row

    with mock.patch.object(diffusion, "step_merge", checked):
        run_decode(cfg, w, strategy, **kw)


def _conservation_cache(cfg, w, alpha, worst):
    real = kvcache.merge_cache
    vis = cfg.n_visual

    def checked(cache, kept, merged, average=False):
        out = real(cache, kept, merged, average)
        pre = cache.live_positions < vis
        post = out.live_positions < vis
        for a, b in zip(cache.keys + cache.values, out.keys + out.values):
            before = a[pre].astype(np.float64).sum(axis=0)
            after = b[post].astype(np.float64).sum(axis=0)
            worst.append(float(np.abs(after - before).max() / max(np.abs(before).max(), 1e-12)))
        return out

    with mock.patch.object(kvcache, "merge_cache", checked):
        run_decode(cfg, w, "d3tom_constant", alpha=alpha, use_cache=True)


def criterion_5():
    rng = np.random.default_rng(5)
    hidden_worst, cache_worst = [], []
    for _ in range(6):
        cfg = tiny_config(rng, n_visual=int(rng.integers(40, 200)), n_steps=int(rng.integers(3, 7)),
                          n_output=int(rng.integers(4, 12)))
        w = init_weights(cfg)
        alpha = float(rng.uniform(0.3, 0.95))
        _conservation_hidden(cfg, w, "d3tom_constant", {"alpha": alpha}, hidden_worst)
        _conservation_hidden(cfg, w, "d3tom_linear", {"alpha": 0.5}, hidden_worst)
        _conservation_cache(cfg, w, alpha, cache_worst)
    ok = hidden_worst and cache_worst and max(hidden_worst) <= 1e-4 and max(cache_worst) <= 1e-4
    return bool(ok), f"{len(hidden_worst)} hidden merges worst {max(hidden_worst):.2e}; " \
                     f"{len(cache_worst)} cache tensors worst {max(cache_worst):.2e}"


def criterion_6():
    rng = np.random.default_rng(6)
    failures = []
    for trial in range(50):
        n_out, n_steps = int(rng.integers(1, 25)), int(rng.integers(1, 13))
        cfg = tiny_config(rng, n_output=n_out, n_steps=n_steps, n_layers=2, merge_layer=1)
        _, trace = run_decode(cfg, init_weights(cfg), "d3tom_constant", alpha=0.5)
        sets = [set(r.revealed.positions) for r in trace.steps]
        flat = [p for s in sets for p in s]
        expected, left = [], n_out
        for t in range(n_steps, 0, -1):
            expected.append(reveal_count(left, t))
            left -= expected[-1]
        guided = [len(r.deciders) for r in trace.steps]
        ok = (len(flat) == len(set(flat)) and sorted(flat) == list(range(n_out))
              and [len(s) for s in sets] == expected and guided == [0] + expected[:-1])
        if not ok:
            failures.append((trial, n_out, n_steps))
    return not failures, f"50 trajectories, failures: {failures or 'none'}"


def _naive(q, k, v):
    q64, k64 = q.astype(np.float64), k.astype(np.float64)
    s = q64 @ k64.T / math.sqrt(q.shape[1])
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return p, p @ v.astype(np.float64)


def criterion_7():
    rng = np.random.default_rng(7)
    worst_a = worst_s = 0.0
    cases = 0
    for _ in range(40):
        n, d = int(rng.integers(1, 257)), int(rng.integers(1, 65))
        q = rng.standard_normal((n, d)).astype(np.float32)
        k = rng.standard_normal((n, d)).astype(np.float32)
        v = rng.standard_normal((n, d)).astype(np.float32)
        p, ref = _naive(q, k, v)
        rows = np.sort(rng.choice(n, size=min(n, int(rng.integers(1, 9))), replace=False))
        hi = int(rng.integers(1, n + 1))
        ref_s = p[rows, :hi].sum(axis=0)
        for block in sorted({1, min(7, n), min(16, n), n}):
            out = stream_attention(q, k, v, block)
            worst_a = max(worst_a, float(np.abs(out - ref).max() / np.abs(ref).max()))
            sc = stream_decider_scores(q[rows], k, (0, hi), block)
            worst_s = max(worst_s, float(np.abs(sc - ref_s).max() / np.abs(ref_s).max()))
            cases += 1
    return worst_a <= 1e-5 and worst_s <= 1e-6, f"{cases} cases, attention {worst_a:.1e}, scores {worst_s:.1e}"


def criterion_8():
    rng = np.random.default_rng(8)
    kept_all = 0
    for _ in range(100):
        n_vis = int(rng.integers(50, 1025))
        n = n_vis + int(rng.integers(1, 64)) + 16
        deciders = rng.choice(np.arange(n_vis, n), size=int(rng.integers(1, 9)), replace=False)
        planted = rng.choice(n_vis, size=5, replace=False)
        attn = rng.random((n, n))
        others = np.ones(n, bool)
        others[planted] = False
        top = attn[:, others].max(axis=1, keepdims=True)
        attn[:, planted] = top * rng.uniform(10, 20, size=(n, 5))
        attn = (attn / attn.sum(axis=1, keepdims=True)).astype(np.float32)
        plan = partition(importance_scores(attn, deciders, (0, n_vis)), 0.9)
        kept_all += bool(np.isin(planted, plan.kept).all())
    return kept_all == 100, f"planted tokens all kept in {kept_all}/100 trials"


def criterion_9(repeat: int = 5):
    cfg = ModelConfig()
    w = init_weights(cfg)
    warm = cfg.with_(n_visual=32, n_prompt=4, n_output=4, n_steps=2)
    run_decode(warm, init_weights(warm), "d3tom_constant", alpha=0.9)
    base, merged = [], []
    for _ in range(repeat):
        t0 = time.perf_counter()
        run_decode(cfg, w)
        t1 = time.perf_counter()
        run_decode(cfg, w, "d3tom_constant", alpha=0.9)
        base.append(t1 - t0)
        merged.append(time.perf_counter() - t1)
    ratio = statistics.median(merged) / statistics.median(base)
    return ratio <= 0.60, f"median {statistics.median(merged):.1f}s vs {statistics.median(base):.1f}s " \
                          f"over {repeat} repeats, ratio {ratio:.1%}"


def criterion_10():
    lo, hi = Fraction(1, 2), Fraction(9, 10)
    fwd, rev = MergeSchedule.linear(lo, hi), MergeSchedule.linear(lo, hi, reversed_=True)
    same_flops = d3tom_flops(LAVIDA_8B, fwd) == d3tom_flops(LAVIDA_8B, rev)
    cfg = ModelConfig(vocab_size=64, d_model=32, d_ff=64, n_layers=4, n_heads=2, n_visual=1000, n_prompt=8,
                      n_output=16, n_steps=8, merge_layer=1, d_visual=16)
    w = init_weights(cfg)
    _, tf = run_decode(cfg, w, "d3tom_linear", alpha_min=0.5, alpha_max=0.9)
    _, tr = run_decode(cfg, w, "d3tom_linear_reversed", alpha_min=0.5, alpha_max=0.9)
    kf = [r.merge.n_kept for r in tf.steps[1:]]
    kr = [r.merge.n_kept for r in tr.steps[1:]]
    first_gap = kf[0] - kr[0]
    ok = same_flops and kf != kr and sorted(kf) == sorted(kr) and abs(first_gap - 0.4 * cfg.n_visual) <= 1
    return ok, f"FLOPs equal: {same_flops}; kept fwd {kf[0]}..{kf[-1]}, rev {kr[0]}..{kr[-1]}, first gap {first_gap}"


CRITERIA = {
    1: ("cost table reproduction", criterion_1),
    2: ("merge-layer sweep", criterion_2),
    3: ("schedule delta negligible", criterion_3),
    4: ("zero-ratio no-op equivalence", criterion_4),
    5: ("merge conservation", criterion_5),
    6: ("decider partition", criterion_6),
    7: ("streaming oracle equivalence", criterion_7),
    8: ("planted saliency retention", criterion_8),
    9: ("wall-clock speedup", criterion_9),
    10: ("schedule direction ablation", criterion_10),
}


def run_criterion(n: int) -> tuple:
    name, fn = CRITERIA[n]
    ok, detail = fn()
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2} {name}: {detail}"
    RESULTS[n] = line
    print(line)
    return ok, detail


@pytest.mark.parametrize("n", [pytest.param(n, marks=pytest.mark.slow) if n == 9 else n for n in CRITERIA])
def test_criterion(n):
    ok, detail = run_criterion(n)
    assert ok, detail


if __name__ == "__main__":
    failed = [n for n in CRITERIA if not run_criterion(n)[0]]
    sys.exit(1 if failed else 0)
