"""Masked-diffusion decoding loop with optional decider-guided merging.

Decoding runs t = T, T-1, ..., 1. Each step predicts every masked output
position greedily, reveals the ``ceil(remaining / t)`` most confident ones,
and the positions revealed on that step become the deciders of the next.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .errors import InvalidInput
from .merge import MergeSchedule, TraceRow, step_merge
from .toymodel import ModelConfig, Weights, forward_full, make_inputs

NOT_REVEALED = 0
STRATEGIES = ("none", "d3tom_constant", "d3tom_linear", "d3tom_linear_reversed")


@dataclass(frozen=True)
class SequenceState:
    visual_len: int
    prompt_len: int
    output_len: int
    output_tokens: np.ndarray
    revealed_at: np.ndarray  # step index that revealed each output, 0 while masked
    positions: np.ndarray
    step: int
    mask_id: int

    @property
    def masked(self) -> np.ndarray:
        return np.flatnonzero(self.output_tokens == self.mask_id)

    def check(self, n_steps: int) -> None:
        revealed = self.output_tokens != self.mask_id
        if np.any(revealed != (self.revealed_at != NOT_REVEALED)):
            raise InvalidInput("revealed tokens and revealed_at disagree")
        stamped = self.revealed_at[revealed]
        if stamped.size and (stamped.min() < 1 or stamped.max() > n_steps):
            raise InvalidInput("revealed_at outside [1, T]")
        if np.any(np.diff(self.positions) <= 0):
            raise InvalidInput("positions must be strictly increasing")


@dataclass(frozen=True)
class DeciderSet:
    positions: tuple = ()

    def __len__(self) -> int:
        return len(self.positions)

    def rows(self, offset: int) -> list:
        return [offset + p for p in self.positions]


def init_state(config: ModelConfig) -> SequenceState:
    return SequenceState(
        visual_len=config.n_visual,
        prompt_len=config.n_prompt,
        output_len=config.n_output,
        output_tokens=np.full(config.n_output, config.mask_id, dtype=np.int64),
        revealed_at=np.zeros(config.n_output, dtype=np.int64),
        positions=np.arange(config.n_total, dtype=np.int64),
        step=config.n_steps,
        mask_id=config.mask_id,
    )


def greedy_decode(logits):
    """Argmax id (smallest id on ties) and its softmax probability, per row."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    tokens = np.argmax(z, axis=1)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    conf = p[np.arange(z.shape[0]), tokens] / p.sum(axis=1)
    return tokens.astype(np.int64), conf


def reveal_count(n_masked: int, t: int) -> int:
    return -(-n_masked // t) if n_masked else 0


def unmask_schedule(state: SequenceState, predictions, confidences, t: int) -> SequenceState:
    """Reveal the ``ceil(masked / t)`` most confident masked positions.

    ``predictions`` and ``confidences`` are indexed by output position; only
    masked positions are looked at. Equal confidences go to the lower
    position.
    """
    if t < 1:
        raise InvalidInput(f"step index must be >= 1, got {t}")
    masked = state.masked
    k = reveal_count(masked.size, t)
    conf = np.asarray(confidences, dtype=np.float64)[masked]
    chosen = masked[np.lexsort((masked, -conf))[:k]]
    tokens = state.output_tokens.copy()
    revealed_at = state.revealed_at.copy()
    tokens[chosen] = np.asarray(predictions, dtype=np.int64)[chosen]
    revealed_at[chosen] = t
    return replace(state, output_tokens=tokens, revealed_at=revealed_at, step=t - 1)


def next_decider_set(state_t_minus_1: SequenceState, state_t: SequenceState) -> DeciderSet:
    """Positions masked in ``state_t`` and revealed in ``state_t_minus_1``."""
    now = state_t_minus_1.output_tokens != state_t_minus_1.mask_id
    before = state_t.output_tokens == state_t.mask_id
    return DeciderSet(tuple(int(i) for i in np.flatnonzero(now & before)))


@dataclass
class StepRecord:
    step: int  # decoding ordinal s = T - t + 1
    t: int
    deciders: DeciderSet  # guided this step's merge
    revealed: DeciderSet  # revealed by this step; the next step's deciders
    merge: TraceRow
    wall_s: float


@dataclass
class DecodeTrace:
    steps: list = field(default_factory=list)
    wall_s: float = 0.0


def _advance(state: SequenceState, logits, t: int, config: ModelConfig):
    masked = state.masked
    preds = np.zeros(config.n_output, dtype=np.int64)
    confs = np.full(config.n_output, -np.inf)
    # the mask token is the last id and is never predicted
    tok, conf = greedy_decode(logits[masked][:, : config.mask_id])
    preds[masked] = tok
    confs[masked] = conf
    new = unmask_schedule(state, preds, confs, t)
    return new, next_decider_set(new, state)


def resolve_schedule(merge_strategy: Union[str, MergeSchedule, None], alpha=0.0, alpha_min=None, alpha_max=None):
    if merge_strategy is None or isinstance(merge_strategy, MergeSchedule):
        return merge_strategy
    if merge_strategy not in STRATEGIES:
        raise InvalidInput(f"unknown merge strategy {merge_strategy!r}; pick one of {STRATEGIES}")
    if merge_strategy == "none":
        return None
    if merge_strategy == "d3tom_constant":
        return MergeSchedule.constant(alpha)
    reverse = merge_strategy == "d3tom_linear_reversed"
    if alpha_min is None or alpha_max is None:
        return MergeSchedule.from_mean(alpha, "linear_reversed" if reverse else "linear")
    return MergeSchedule.linear(alpha_min, alpha_max, reversed_=reverse)


def run_decode(
    config: ModelConfig,
    weights: Weights,
    merge_strategy: Union[str, MergeSchedule, None] = "none",
    *,
    alpha=0.0,
    alpha_min=None,
    alpha_max=None,
    use_cache: bool = False,
    inputs=None,
):
    """Decode ``n_output`` tokens from an all-mask start.

    Returns ``(final_tokens, trace)``.
    """
    schedule = resolve_schedule(merge_strategy, alpha, alpha_min, alpha_max)
    if use_cache:
        from .kvcache import run_cached_decode

        return run_cached_decode(config, weights, schedule, inputs=inputs)
    inputs = inputs if inputs is not None else make_inputs(config)
    state = init_state(config)
    deciders = DeciderSet()
    trace = DecodeTrace()
    out0 = config.output_start
    start = time.perf_counter()
    for s in range(1, config.n_steps + 1):
        t = config.n_steps - s + 1
        tick = time.perf_counter()
        merge_row = [TraceRow(s, 0.0, 0, config.n_visual, 0, config.n_total)]
        hook = None
        if schedule is not None and len(deciders):
            rows = deciders.rows(out0)

            def hook(h, attn, positions, rows=rows, s=s, sink=merge_row):
                h, keep, sink[0] = step_merge(h, attn, rows, schedule, s, config)
                return h, keep

        logits = forward_full(state, weights, hook, inputs)
        state, revealed = _advance(state, logits, t, config)
        trace.steps.append(StepRecord(s, t, deciders, revealed, merge_row[0], time.perf_counter() - tick))
        deciders = revealed
    trace.wall_s = time.perf_counter() - start
    return state.output_tokens.copy(), trace
