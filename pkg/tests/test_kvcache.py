"""Prefix cache build, cache merging and cached decoding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d3tom.diffusion import run_decode
from d3tom.errors import InvalidInput
from d3tom.kvcache import PrefixCache, build_prefix_cache, merge_cache


def toy_cache(keys, values=None, n_layers=2):
    keys = np.asarray(keys, np.float32)
    values = keys * 2 if values is None else np.asarray(values, np.float32)
    return PrefixCache([keys.copy() for _ in range(n_layers)], [values.copy() for _ in range(n_layers)],
                       np.arange(keys.shape[0]))


class TestBuild:
    def test_shape(self, small_cfg, small_weights):
        cache = build_prefix_cache(small_cfg, small_weights)
        assert len(cache.keys) == small_cfg.n_layers
        assert cache.kept_len == small_cfg.n_visual + small_cfg.n_prompt
        cache.check()

    def test_rebuild_identical(self, small_cfg, small_weights):
        a = build_prefix_cache(small_cfg, small_weights)
        b = build_prefix_cache(small_cfg, small_weights)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.keys + a.values, b.keys + b.values))

    def test_cached_decode_repeatable(self, small_cfg, small_weights):
        a, _ = run_decode(small_cfg, small_weights, "d3tom_constant", alpha=0.5, use_cache=True)
        b, _ = run_decode(small_cfg, small_weights, "d3tom_constant", alpha=0.5, use_cache=True)
        np.testing.assert_array_equal(a, b)
        assert (a != small_cfg.mask_id).all()

    def test_cached_decode_reports_merges(self, small_cfg, small_weights):
        _, trace = run_decode(small_cfg, small_weights, "d3tom_constant", alpha=0.75, use_cache=True)
        assert trace.steps[0].merge.n_merged == 0
        for r in trace.steps[1:]:
            assert r.merge.n_kept == 10 and r.merge.n_merged == 30
            assert r.merge.rows_after == small_cfg.n_total - 30


class TestMergeCache:
    def test_nothing_merged(self):
        c = toy_cache(np.eye(3))
        assert merge_cache(c, [0, 1, 2], []) is c

    def test_single_kept_sums(self, rng):
        k = rng.standard_normal((4, 3))
        out = merge_cache(toy_cache(k), [2], [0, 1, 3])
        np.testing.assert_allclose(out.keys[0][0], k.sum(axis=0), rtol=1e-6)
        np.testing.assert_allclose(out.values[1][0], 2 * k.sum(axis=0), rtol=1e-6)
        np.testing.assert_array_equal(out.live_positions, [2])

    def test_hand_example(self):
        out = merge_cache(toy_cache([[1, 0], [0, 1], [0.9, 0.1]]), [0, 1], [2])
        np.testing.assert_allclose(out.keys[0], [[1.9, 0.1], [0, 1]], rtol=1e-6)
        assert out.kept_len == 2

    def test_routes_by_key_per_layer(self):
        c = PrefixCache([np.array([[1, 0], [0, 1], [0.9, 0.1]], np.float32),
                         np.array([[1, 0], [0, 1], [0.1, 0.9]], np.float32)],
                        [np.eye(3, dtype=np.float32)[:, :2]] * 2, np.arange(3))
        out = merge_cache(c, [0, 1], [2])
        np.testing.assert_allclose(out.values[0], [[1, 0], [0, 1]])
        np.testing.assert_allclose(out.keys[1], [[1, 0], [0.1, 1.9]], rtol=1e-6)

    def test_not_live_rejected(self):
        c = merge_cache(toy_cache(np.eye(4)), [0, 1, 2], [3])
        with pytest.raises(InvalidInput):
            merge_cache(c, [0], [3])
        with pytest.raises(InvalidInput):
            merge_cache(c, [0, 1], [1])

    def test_average_mode(self):
        out = merge_cache(toy_cache([[1, 0], [0, 1], [0.9, 0.1]]), [0, 1], [2], average=True)
        np.testing.assert_allclose(out.keys[0][0], [0.95, 0.05], rtol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 40), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1), st.floats(0.01, 50))
    def test_conservation_and_scale(self, n, alpha, seed, c):
        r = np.random.default_rng(seed)
        k = r.standard_normal((n, 6))
        v = r.standard_normal((n, 6))
        perm = r.permutation(n)
        n_keep = max(1, int((1 - alpha) * n))
        kept, merged = perm[:n_keep], perm[n_keep:]
        out = merge_cache(toy_cache(k, v, 3), kept, merged)
        assert all(x.shape[0] == n_keep for x in out.keys + out.values)
        for layer in range(3):
            np.testing.assert_allclose(out.keys[layer].sum(axis=0, dtype=np.float64),
                                       k.astype(np.float32).sum(axis=0, dtype=np.float64), rtol=1e-4, atol=1e-4)
            np.testing.assert_allclose(out.values[layer].sum(axis=0, dtype=np.float64),
                                       v.astype(np.float32).sum(axis=0, dtype=np.float64), rtol=1e-4, atol=1e-4)
        scaled = merge_cache(toy_cache(k * c, v, 3), kept, merged)
        np.testing.assert_allclose(scaled.values[0], out.values[0], rtol=1e-6, atol=1e-6)
