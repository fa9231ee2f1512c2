"""Closed-form inference cost of merged and pruned decoding.

Costs are multiply-accumulate counts (a d x d projection of n rows costs
n*d^2). A layer over n rows costs ``4nd^2 + 2n^2 d`` for attention plus
``3ndm`` for the gated FFN.

All arithmetic is exact: ratios are converted to ``Fraction`` (0.9 becomes
9/10), so results are ints or Fractions with no rounding. Callers wanting a
plain number use ``int(round(x))`` or ``float(x)``.

Two conventions matter for matching published tables:

* the first decoding step never merges or prunes (it has no deciders), and
  FastV is given the same exemption so methods are compared like for like;
* a time-varying ratio is laid over the T-1 merging steps (see
  ``merge.merge_alpha``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from statistics import pvariance
from typing import Optional

from .errors import InvalidInput
from .merge import MergeSchedule, merge_alpha

METHODS = ("baseline", "d3tom", "d3tom-t", "d3tom-t-rev", "fastv", "pdrop", "visionzip")
DEFAULT_RETAIN = ("50", "33.3", "25", "16.7", "10")


@dataclass(frozen=True)
class CostParams:
    d: int
    m: int
    L: int
    T: int
    V: int
    P: int
    O: int
    l_star: int = 3

    @property
    def N(self) -> int:
        return self.V + self.P + self.O

    def with_(self, **changes) -> "CostParams":
        return replace(self, **changes)


LAVIDA_8B = CostParams(d=4096, m=12288, L=32, T=32, V=1000, P=64, O=64, l_star=3)


def exact(x) -> Fraction:
    """Decimal-exact Fraction for a float ratio (``0.9 -> 9/10``)."""
    if isinstance(x, (int, Fraction)):
        return Fraction(x)
    return Fraction(repr(float(x)))


def attn_flops(n, d):
    return 4 * n * d * d + 2 * n * n * d


def ffn_flops(n, d, m):
    return 3 * n * d * m


def layer_flops(n, d, m):
    return attn_flops(n, d) + ffn_flops(n, d, m)


def baseline_flops(p: CostParams):
    return p.T * p.L * layer_flops(p.N, p.d, p.m)


def merge_overhead(alpha, v, d):
    """Ranking plus similarity cost of one merge: ``2a(1-a)V^2 d + aVd``."""
    a = exact(alpha)
    return 2 * a * (1 - a) * v * v * d + a * v * d


def _as_schedule(schedule) -> MergeSchedule:
    if isinstance(schedule, MergeSchedule):
        return MergeSchedule(schedule.kind, exact(schedule.alpha), exact(schedule.alpha_min), exact(schedule.alpha_max))
    return MergeSchedule.constant(exact(schedule))


def merging_ratios(p: CostParams, schedule) -> list:
    """Ratios of the T-1 merging steps (decoding steps 2..T)."""
    sched = _as_schedule(schedule)
    return [merge_alpha(sched, s, p.T) for s in range(2, p.T + 1)]


def merged_length(p: CostParams, alpha) -> int:
    return p.N - math.floor(exact(alpha) * p.V)


def d3tom_step_flops(p: CostParams, alpha):
    nm = merged_length(p, alpha)
    return (
        p.l_star * layer_flops(p.N, p.d, p.m)
        + attn_flops(p.N, p.d) + ffn_flops(nm, p.d, p.m)
        + (p.L - p.l_star - 1) * layer_flops(nm, p.d, p.m)
        + merge_overhead(alpha, p.V, p.d)
    )


def d3tom_flops(p: CostParams, schedule):
    """Full first step, then one merge at layer ``l_star`` on each later step."""
    if not 0 <= p.l_star < p.L:
        raise InvalidInput(f"l_star must lie in [0, {p.L})")
    if p.T == 0:
        return 0
    first = p.L * layer_flops(p.N, p.d, p.m)
    return first + sum(d3tom_step_flops(p, a) for a in merging_ratios(p, schedule))


def schedule_variance(p: CostParams, schedule) -> Fraction:
    """Population variance of the merging ratios.

    ``schedule`` may also be an explicit sequence of per-step ratios, which is
    used as given.
    """
    if isinstance(schedule, (list, tuple)):
        ratios = [exact(a) for a in schedule]
    else:
        ratios = merging_ratios(p, schedule)
    return pvariance(ratios) if len(ratios) > 1 else Fraction(0)


def schedule_delta(p: CostParams, schedule):
    """Quadratic-attention cost gap of a varying schedule: ``4 d V^2 (T-1) Var``.

    Var is the population variance of the merging-step ratios. Its size is
    judged against ``4 d N^2 T L`` (see ``delta_fraction``).
    """
    return 4 * p.d * p.V * p.V * (p.T - 1) * schedule_variance(p, schedule)


def delta_fraction(p: CostParams, schedule) -> Fraction:
    return schedule_delta(p, schedule) / (4 * p.d * p.N * p.N * p.T * p.L)


def schedule_cost_gap(p: CostParams, schedule):
    """Exact ``d3tom(schedule) - d3tom(constant mean)`` when every ``alpha V`` is whole.

    Linear terms cancel at equal mean; what remains is ``2d V^2 (T-1) Var``
    from each of the ``L - l* - 1`` shortened attention layers, minus the same
    amount from the ``-2 a^2 V^2 d`` part of the merge overhead.
    """
    var = schedule_variance(p, schedule)
    return 2 * p.d * p.V * p.V * (p.T - 1) * var * (p.L - p.l_star - 2)


def fastv_flops(p: CostParams, ratio, layer: Optional[int] = None, exempt_first_step: bool = True):
    """Prune ``ratio`` of the visual tokens at layer ``layer`` on every step.

    Each pruning step pays ``2 d V`` for ranking. With ``exempt_first_step``
    the first decoding step runs unpruned, like the merged decoder.
    """
    k = p.l_star if layer is None else layer
    if not 0 <= k < p.L:
        raise InvalidInput(f"FastV layer must lie in [0, {p.L})")
    r = exact(ratio)
    np_ = p.N - r * p.V
    step = k * layer_flops(p.N, p.d, p.m) + (p.L - k) * layer_flops(np_, p.d, p.m) + 2 * p.d * p.V
    if not exempt_first_step or p.T == 0:
        return p.T * step
    return p.L * layer_flops(p.N, p.d, p.m) + (p.T - 1) * step


def pdrop_flops(p: CostParams, alpha):
    """Four equal stages; visual count shrinks by ``beta = 1.5(1 - alpha)`` per stage."""
    if p.L % 4:
        raise InvalidInput(f"PyramidDrop needs L divisible by 4, got {p.L}")
    beta = Fraction(3, 2) * (1 - exact(alpha))
    counts = [Fraction(p.V)]
    for _ in range(3):
        counts.append(min(counts[-1] * beta, Fraction(p.V)))
    stage = p.L // 4
    body = sum(stage * layer_flops(p.P + p.O + c, p.d, p.m) for c in counts)
    return p.T * (body + 2 * p.d * sum(counts[:3]))


def visionzip_flops(p: CostParams, ratio):
    r = exact(ratio)
    return p.T * p.L * layer_flops(p.P + p.O + (1 - r) * p.V, p.d, p.m)


@dataclass(frozen=True)
class CostReport:
    method: str
    retain_pct: str
    ratio: Fraction
    layer: Optional[int]
    flops_abs: Fraction
    flops_rel: Fraction
    params: CostParams


def retain_to_alpha(retain_pct) -> Fraction:
    r = Fraction(str(retain_pct)) / 100
    if not 0 < r <= 1:
        raise InvalidInput(f"retention {retain_pct}% outside (0, 100]")
    return 1 - r


def method_flops(p: CostParams, method: str, alpha):
    if method == "baseline":
        return baseline_flops(p)
    if method == "d3tom":
        return d3tom_flops(p, alpha)
    if method in ("d3tom-t", "d3tom-t-rev"):
        kind = "linear_reversed" if method == "d3tom-t-rev" else "linear"
        return d3tom_flops(p, MergeSchedule.from_mean(exact(alpha), kind))
    if method == "fastv":
        return fastv_flops(p, alpha)
    if method == "pdrop":
        return pdrop_flops(p, alpha)
    if method == "visionzip":
        return visionzip_flops(p, alpha)
    raise InvalidInput(f"unknown method {method!r}; pick from {', '.join(METHODS)}")


def cost_report(p: CostParams, method: str, retain_pct) -> CostReport:
    alpha = retain_to_alpha(retain_pct)
    flops = method_flops(p, method, alpha)
    base = baseline_flops(p)
    layer = p.l_star if method in ("d3tom", "d3tom-t", "d3tom-t-rev", "fastv") else None
    return CostReport(method, str(retain_pct), alpha, layer, Fraction(flops), Fraction(flops) / base, p)


def cost_table(p: CostParams, methods=METHODS, retain=DEFAULT_RETAIN) -> list:
    """One report per (method, retention); baseline is reported once at 100%."""
    rows = []
    for method in methods:
        if method == "baseline":
            rows.append(cost_report(p, method, "100"))
            continue
        rows.extend(cost_report(p, method, r) for r in retain)
    return rows


def sweep_grid(p: CostParams, l_stars, alphas) -> list:
    """``(l_star, alpha, flops, rel)`` for every cell, in grid order."""
    base = baseline_flops(p)
    out = []
    for ls in l_stars:
        q = p.with_(l_star=ls)
        for a in alphas:
            f = d3tom_flops(q, exact(a))
            out.append((ls, exact(a), f, Fraction(f) / base))
    return out
