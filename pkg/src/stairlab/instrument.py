"""Work counters filled in while a variant runs."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import torch


@dataclass
class StepRecord:
    queries: int
    keys: int
    pairs: int


@dataclass
class Counters:
    """Instrumentation sink. ``pairs``/``queries`` are summed over layer applications."""

    query_key_pairs: int = 0
    ff_tokens: int = 0
    attention_calls: int = 0
    core_calls: int = 0
    passes: Counter = field(default_factory=Counter)
    steps: list[StepRecord] = field(default_factory=list)
    frozen_hashes: dict[int, list[int]] = field(default_factory=dict)

    def begin_core_call(self, query_positions: torch.Tensor, n_keys: int) -> None:
        self.core_calls += 1
        self.passes.update(query_positions.tolist())
        self.steps.append(StepRecord(queries=0, keys=n_keys, pairs=0))

    def record_attention(self, mask: torch.Tensor) -> None:
        pairs = int(mask.sum())
        self.attention_calls += 1
        self.query_key_pairs += pairs
        if self.steps:
            self.steps[-1].pairs += pairs
            self.steps[-1].queries += mask.shape[0]

    def record_feedforward(self, n_tokens: int) -> None:
        self.ff_tokens += n_tokens

    def pass_histogram(self) -> dict[int, int]:
        """Map pass count -> number of token positions processed that many times."""
        return dict(sorted(Counter(self.passes.values()).items()))

    def as_table(self) -> dict[str, int]:
        table = {
            "query_key_pairs": self.query_key_pairs,
            "ff_tokens": self.ff_tokens,
            "attention_calls": self.attention_calls,
            "core_calls": self.core_calls,
        }
        for n, count in self.pass_histogram().items():
            table[f"core_passes_per_token[{n}]"] = count
        return table
