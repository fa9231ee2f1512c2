"""Decider-guided visual token merging.

One merging step, run right after the attention sub-block of the merge layer:

1. score every visual token by the attention mass it receives from the
   decider rows (tokens revealed on the previous step);
2. keep the top ``max(1, floor((1 - alpha) * |V|))`` visual tokens;
3. add every other visual row onto its most cosine-similar kept row and
   drop it from the sequence.

Only visual rows are ever candidates; prompt and output rows pass through.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import kernels
from .errors import InvalidInput

log = logging.getLogger(__name__)

KINDS = ("constant", "linear", "linear_reversed")
_EPS = 1e-9


@dataclass(frozen=True)
class MergeSchedule:
    kind: str = "constant"
    alpha: float = 0.0
    alpha_min: float = 0.0
    alpha_max: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant":
            if not 0 <= self.alpha < 1:
                raise InvalidInput(f"alpha must lie in [0, 1), got {self.alpha}")
        elif not 0 <= self.alpha_min <= self.alpha_max < 1:
            raise InvalidInput(
                f"need 0 <= alpha_min <= alpha_max < 1, got {self.alpha_min}, {self.alpha_max}"
            )

    @classmethod
    def constant(cls, alpha) -> "MergeSchedule":
        return cls("constant", alpha=alpha)

    @classmethod
    def linear(cls, alpha_min, alpha_max, reversed_: bool = False) -> "MergeSchedule":
        return cls("linear_reversed" if reversed_ else "linear", alpha_min=alpha_min, alpha_max=alpha_max)

    @classmethod
    def from_mean(cls, mean, kind: str = "linear") -> "MergeSchedule":
        """Linear ramp with mean ``mean``: top end ``min(mean + 0.1, 0.99)``, bottom end mirrored."""
        if kind == "constant":
            return cls.constant(mean)
        hi = min(mean + Fraction(1, 10), Fraction(99, 100)) if isinstance(mean, Fraction) else min(mean + 0.1, 0.99)
        lo = 2 * mean - hi
        if lo < 0:
            raise InvalidInput(f"mean {mean} is too small for the default endpoint rule")
        return cls(kind, alpha_min=lo, alpha_max=hi)

    @property
    def mean(self):
        return self.alpha if self.kind == "constant" else (self.alpha_min + self.alpha_max) / 2


def alpha_at(schedule: MergeSchedule, s: int, T: int):
    """Merge ratio at ordinal ``s`` (1-based) of a ``T``-long ramp.

    ``linear`` climbs from ``alpha_min`` at s=1 to ``alpha_max`` at s=T;
    ``linear_reversed`` walks the same ramp backwards. Arithmetic is generic,
    so Fraction endpoints give exact ratios.
    """
    if not 1 <= s <= T:
        raise InvalidInput(f"step ordinal {s} outside [1, {T}]")
    if schedule.kind == "constant":
        return schedule.alpha
    if T == 1:
        return schedule.alpha_min
    if schedule.kind == "linear_reversed":
        s = T - s + 1
    return schedule.alpha_min + (schedule.alpha_max - schedule.alpha_min) * (s - 1) / (T - 1)


def merge_alpha(schedule: Optional[MergeSchedule], s: int, T: int):
    """Ratio applied on decoding step ``s`` of ``T``.

    Step 1 has no deciders and never merges, so the ramp is laid over the
    ``T - 1`` merging steps: the first merge uses ``alpha_min`` and the last
    ``alpha_max``, and a reversed schedule visits the same ratios backwards.
    """
    if schedule is None or s == 1:
        return 0
    return alpha_at(schedule, s - 1, T - 1)


def kept_count(alpha, n_visual: int) -> int:
    if isinstance(alpha, Fraction):
        return max(1, math.floor((1 - alpha) * n_visual))
    return max(1, math.floor((1 - alpha) * n_visual + _EPS))


@dataclass
class MergePlan:
    kept: np.ndarray
    merged: np.ndarray
    scores: np.ndarray
    target: dict = field(default_factory=dict)

    @property
    def kept_mask(self) -> np.ndarray:
        mask = np.zeros(self.scores.shape[0], dtype=bool)
        mask[self.kept] = True
        return mask


def importance_scores(attn, decider_rows, visual_range) -> np.ndarray:
    """Attention mass each visual column receives from the decider rows (float64)."""
    rows = np.asarray(sorted(decider_rows), dtype=np.int64)
    if rows.size == 0:
        raise InvalidInput("importance scores need at least one decider")
    lo, hi = (visual_range.start, visual_range.stop) if isinstance(visual_range, range) else visual_range
    return np.asarray(attn)[rows, lo:hi].astype(np.float64).sum(axis=0)


def partition(scores, alpha) -> MergePlan:
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if n < 1:
        raise InvalidInput("partition needs at least one visual token")
    n_keep = kept_count(alpha, n)
    # highest score first, lower index first among equal scores
    order = np.lexsort((np.arange(n), -scores))
    kept = np.sort(order[:n_keep])
    merged = np.sort(order[n_keep:])
    return MergePlan(kept, merged, scores)


def assign_targets(rows, kept, merged) -> np.ndarray:
    """Most cosine-similar kept row for each merged row (ties -> lowest kept index)."""
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    kept = np.ascontiguousarray(kept, dtype=np.int64)
    merged = np.ascontiguousarray(merged, dtype=np.int64)
    if merged.size == 0:
        return np.empty(0, np.int64)
    zero = ~np.any(rows[merged] != 0, axis=1)
    if zero.any():
        log.warning("%d zero-norm rows routed to kept row %d", int(zero.sum()), int(kept[0]))
    return kernels.cosine_targets(rows, kept, merged)


def assign_and_merge(hidden, plan: MergePlan, offset: int = 0):
    """Fold merged visual rows into their targets and drop them.

    ``offset`` is the row of visual token 0 inside ``hidden``. Returns the
    shortened matrix and the surviving row indices of the input.
    """
    hidden = np.ascontiguousarray(hidden, dtype=np.float32)
    if plan.merged.size == 0:
        return hidden, np.arange(hidden.shape[0])
    kept_rows = plan.kept + offset
    merged_rows = plan.merged + offset
    target = assign_targets(hidden, kept_rows, merged_rows)
    plan.target = {int(m): int(t - offset) for m, t in zip(plan.merged, target)}
    summed = kernels.scatter_add_rows(hidden, merged_rows, target)
    surviving = np.setdiff1d(np.arange(hidden.shape[0]), merged_rows, assume_unique=True)
    return summed[surviving], surviving


@dataclass
class TraceRow:
    step: int
    alpha: float
    n_deciders: int
    n_kept: int
    n_merged: int
    rows_after: int
    scores: Optional[np.ndarray] = None
    kept_mask: Optional[np.ndarray] = None


def step_merge(hidden, attn, decider_rows, schedule, s: int, config):
    """One merge at the merge layer of decoding step ``s``.

    Returns ``(hidden', surviving_rows, trace_row)``. With no deciders the
    input passes through untouched.
    """
    vis = config.visual_range
    n = hidden.shape[0]
    if len(decider_rows) == 0:
        return hidden, np.arange(n), TraceRow(s, 0.0, 0, config.n_visual, 0, n)
    alpha = merge_alpha(schedule, s, config.n_steps)
    plan = partition(importance_scores(attn, decider_rows, vis), alpha)
    out, surviving = assign_and_merge(hidden, plan, offset=vis.start)
    row = TraceRow(s, float(alpha), len(decider_rows), plan.kept.size, plan.merged.size,
                   out.shape[0], plan.scores, plan.kept_mask)
    return out, surviving, row
