"""Closed-form attention and feedforward work for every variant.

Counts are computed from chunk arithmetic alone (no tensors, no scheduler
state machine) so they can be compared against the counters recorded by
``run_variant``. Query-key pairs count *allowed* mask entries; every count is
per sequence and summed over layer applications.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .instrument import Counters, StepRecord
from .schedule import STAIR_VARIANTS, VariantConfig


@dataclass
class CostReport:
    query_key_pairs: int
    ff_tokens: int
    core_calls: int
    passes_histogram: dict[int, int]
    steps: list[StepRecord] = field(default_factory=list)

    def as_table(self) -> dict[str, int]:
        table = {
            "query_key_pairs": self.query_key_pairs,
            "ff_tokens": self.ff_tokens,
            "core_calls": self.core_calls,
        }
        for n, count in self.passes_histogram.items():
            table[f"core_passes_per_token[{n}]"] = count
        return table


def _pairs(first_query: int, last_query: int, first_key: int) -> int:
    """Sum over queries p in [first_query, last_query] of (p - first_key + 1)."""
    n = last_query - first_query + 1
    lo = first_query - first_key + 1
    return n * lo + n * (n - 1) // 2


def _stair_cost(cfg: VariantConfig, T: int, apps: int) -> CostReport:
    C = cfg.C
    K = -(-T // C)
    bounds = [(j * C, min((j + 1) * C, T) - 1) for j in range(K)]
    passes = cfg.passes
    n_steps = K + passes - 1 if K else 0
    steps = []
    for s in range(n_steps):
        newest = min(s, K - 1)
        active = [j for j in range(max(0, s - passes + 1), newest + 1)]
        if cfg.variant == "global_cached_staircase":
            first_chunk = 0
        elif cfg.freezes:
            first_chunk = max(0, newest - cfg.N + 1)
        else:
            first_chunk = active[0]
        first_key = bounds[first_chunk][0]
        last = bounds[active[-1]][1]
        q = sum(bounds[j][1] - bounds[j][0] + 1 for j in active)
        pairs = _pairs(bounds[active[0]][0], last, first_key)
        steps.append(StepRecord(queries=q * apps, keys=last - first_key + 1, pairs=pairs * apps))
    return CostReport(
        query_key_pairs=sum(r.pairs for r in steps),
        ff_tokens=sum(r.queries for r in steps),
        core_calls=n_steps,
        passes_histogram={passes: T} if T else {},
        steps=steps,
    )


def _ladder_cost(cfg: VariantConfig, T: int, apps: int) -> CostReport:
    steps = []
    keep = cfg.S - 1
    for a in range(0, T, cfg.segment_len):
        b = min(a + cfg.segment_len, T)
        cached = min(keep, a)
        pairs = sum(min(cfg.S, p - (a - cached) + 1) for p in range(a, b))
        for _ in range(cfg.N):
            steps.append(StepRecord(queries=(b - a) * apps, keys=cached + b - a, pairs=pairs * apps))
    return CostReport(
        query_key_pairs=sum(r.pairs for r in steps),
        ff_tokens=sum(r.queries for r in steps),
        core_calls=len(steps),
        passes_histogram={cfg.N: T} if T else {},
        steps=steps,
    )


def cost_model(cfg: VariantConfig, T: int, layer_apps: int) -> CostReport:
    """Analytic per-sequence work for ``T`` tokens through ``layer_apps`` layer applications."""
    if cfg.variant in STAIR_VARIANTS:
        return _stair_cost(cfg, T, layer_apps)
    return _ladder_cost(cfg, T, layer_apps)


def from_counters(counters: Counters) -> CostReport:
    return CostReport(
        query_key_pairs=counters.query_key_pairs,
        ff_tokens=counters.ff_tokens,
        core_calls=counters.core_calls,
        passes_histogram=counters.pass_histogram(),
        steps=list(counters.steps),
    )


def steady_state(cfg: VariantConfig) -> dict[str, int]:
    """Per-step, per-layer counts once the window is full (long sequences).

    Staircase: ``NC`` queries over ``NC`` keys, ``NC(NC+1)/2`` allowed pairs.
    Cached: ``MC`` queries over ``NC`` keys. Ladder: ``S`` pairs per token.
    """
    N, C, M = cfg.N, cfg.C, cfg.M
    if cfg.variant == "staircase" or (cfg.variant == "cached_staircase" and not cfg.freezes):
        return {"queries": N * C, "keys": N * C, "pairs": N * C * (N * C + 1) // 2}
    if cfg.variant == "cached_staircase":
        frozen = (N - M) * C
        return {"queries": M * C, "keys": N * C, "pairs": M * C * frozen + M * C * (M * C + 1) // 2}
    if cfg.variant == "global_cached_staircase":
        raise ValueError("global cached staircase has no steady state: its cache grows every step")
    return {"queries_per_token": 1, "pairs_per_token": cfg.S}
