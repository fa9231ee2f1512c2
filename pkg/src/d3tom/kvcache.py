"""Prefix key/value cache for the visual and prompt rows, with cache merging.

The cache is filled by one full forward pass on the first decoding step and
then frozen; later steps recompute only the output rows and attend against
``[cached prefix ; fresh output]`` keys and values. This is an approximation
of uncached decoding, not an equivalent of it.

Merging routes each dropped visual row to the kept row with the most similar
*key* and adds both its key and value there.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .diffusion import DecodeTrace, DeciderSet, StepRecord, _advance, init_state
from .errors import InvalidInput
from .merge import TraceRow, importance_scores, merge_alpha, partition
from .toymodel import (ModelConfig, Weights, attend, embed_sequence, ffn_block, logits_for,
                       make_inputs, matmul, qkv, rms_norm)


@dataclass
class PrefixCache:
    keys: list  # one (kept_len, d) matrix per layer
    values: list
    live_positions: np.ndarray
    first_layer: int = 0

    @property
    def kept_len(self) -> int:
        return int(self.live_positions.shape[0])

    def layers_from(self, layer: int) -> "PrefixCache":
        off = layer - self.first_layer
        return PrefixCache(self.keys[off:], self.values[off:], self.live_positions, layer)

    def check(self) -> None:
        for k, v in zip(self.keys, self.values):
            if k.shape[0] != self.kept_len or v.shape[0] != self.kept_len:
                raise InvalidInput("cache rows out of step with live_positions")
        if np.any(np.diff(self.live_positions) <= 0):
            raise InvalidInput("live positions must be strictly increasing")


def _full_pass(weights: Weights, state, inputs):
    """Uncached forward that also records per-layer prefix K/V."""
    cfg = weights.config
    n_prefix = cfg.n_visual + cfg.n_prompt
    h = embed_sequence(weights, state.output_tokens, inputs)
    pos = weights.pos_table[state.positions]
    keys, values = [], []
    for lw in weights.layers:
        q, k, v = qkv(h, lw, pos)
        keys.append(k[:n_prefix].copy())
        values.append(v[:n_prefix].copy())
        o, _ = attend(q, k, v, cfg.n_heads, False)
        h = ffn_block(h + matmul(o, lw.wo), lw)
    cache = PrefixCache(keys, values, np.arange(n_prefix, dtype=np.int64))
    return cache, logits_for(weights, h, state.positions)


def build_prefix_cache(config: ModelConfig, weights: Weights, inputs=None) -> PrefixCache:
    inputs = inputs if inputs is not None else make_inputs(config)
    cache, _ = _full_pass(weights, init_state(config), inputs)
    return cache


def merge_cache(cache: PrefixCache, kept, merged, average: bool = False) -> PrefixCache:
    """Fold ``merged`` prefix positions into their nearest kept key, every layer.

    ``kept`` and ``merged`` are original positions. Each layer picks its own
    targets from its own keys. With ``average`` the receiving rows become the
    mean of themselves and everything routed to them instead of the sum.
    """
    kept = np.sort(np.asarray(list(kept), dtype=np.int64))
    merged = np.sort(np.asarray(list(merged), dtype=np.int64))
    if merged.size == 0:
        return cache
    if np.intersect1d(kept, merged).size:
        raise InvalidInput("kept and merged overlap")
    live = cache.live_positions
    kept_rows = np.searchsorted(live, kept)
    merged_rows = np.searchsorted(live, merged)
    for pos, rows in ((kept, kept_rows), (merged, merged_rows)):
        if np.any(rows >= live.size) or np.any(live[np.minimum(rows, live.size - 1)] != pos):
            raise InvalidInput("merge_cache given a position that is not live")
    surviving = np.setdiff1d(np.arange(live.size), merged_rows, assume_unique=True)
    new_k, new_v = [], []
    for k, v in zip(cache.keys, cache.values):
        target = kernels.cosine_targets(np.ascontiguousarray(k), kept_rows, merged_rows)
        k2 = kernels.scatter_add_rows(k, merged_rows, target)
        v2 = kernels.scatter_add_rows(v, merged_rows, target)
        if average:
            counts = np.ones(live.size)
            np.add.at(counts, target, 1.0)
            k2 = (k2 / counts[:, None]).astype(np.float32)
            v2 = (v2 / counts[:, None]).astype(np.float32)
        new_k.append(k2[surviving])
        new_v.append(v2[surviving])
    return PrefixCache(new_k, new_v, live[surviving], cache.first_layer)


def _cached_step(weights: Weights, cache: PrefixCache, out_tokens, deciders, schedule, s):
    cfg = weights.config
    out_pos = np.arange(cfg.output_start, cfg.n_total)
    pos = weights.pos_table[out_pos]
    h = weights.embed[np.asarray(out_tokens, dtype=np.int64)]
    row = TraceRow(s, 0.0, 0, cfg.n_visual, 0, cfg.n_total)
    active = cache
    for layer, lw in enumerate(weights.layers):
        hooked = schedule is not None and len(deciders) > 0 and layer == cfg.merge_layer
        off = layer - active.first_layer
        q, k, v = qkv(h, lw, pos)
        keys = np.concatenate([active.keys[off], k])
        vals = np.concatenate([active.values[off], v])
        o, attn = attend(q, keys, vals, cfg.n_heads, hooked)
        h = ffn_block(h + matmul(o, lw.wo), lw)
        if hooked:
            alpha = merge_alpha(schedule, s, cfg.n_steps)
            plan = partition(importance_scores(attn, deciders.positions, (0, cfg.n_visual)), alpha)
            tail = merge_cache(cache.layers_from(layer + 1), plan.kept, plan.merged)
            active = tail if tail.keys else active
            row = TraceRow(s, float(alpha), len(deciders), plan.kept.size, plan.merged.size,
                           tail.kept_len + cfg.n_output, plan.scores, plan.kept_mask)
    return matmul(rms_norm(h), weights.head), row


def run_cached_decode(config: ModelConfig, weights: Weights, schedule, inputs=None):
    inputs = inputs if inputs is not None else make_inputs(config)
    state = init_state(config)
    trace = DecodeTrace()
    start = time.perf_counter()
    cache, logits = _full_pass(weights, state, inputs)
    deciders = DeciderSet()
    for s in range(1, config.n_steps + 1):
        t = config.n_steps - s + 1
        tick = time.perf_counter()
        if s == 1:
            row = TraceRow(s, 0.0, 0, config.n_visual, 0, config.n_total)
        else:
            logits, row = _cached_step(weights, cache, state.output_tokens, deciders, schedule, s)
        state, revealed = _advance(state, logits, t, config)
        trace.steps.append(StepRecord(s, t, deciders, revealed, row, time.perf_counter() - tick))
        deciders = revealed
    trace.wall_s = time.perf_counter() - start
    return state.output_tokens.copy(), trace
