"""Staircase scheduling: chunking, windows, caches and variant dispatch.

A staircase step feeds the newest chunk together with the still-maturing
backward chunks through the shared core; every chunk is processed ``N`` times
(``M`` times, then kept as key/value-only cache, in the cached variants).
The Ladder path instead repeats the core ``N`` times over whole segments with a
span-limited attention and one Transformer-XL style cache per (pass, layer).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import torch

from .errors import ConfigError, SchedulerError
from .instrument import Counters
from .transcore import ForwardContext, HiddenBlock, TransCore

VARIANTS = ("staircase", "cached_staircase", "global_cached_staircase", "ladder", "baseline_xl")
STAIR_VARIANTS = VARIANTS[:3]


@dataclass(frozen=True)
class VariantConfig:
    """Scheduling hyperparameters. ``M`` defaults to ``N``; ``C`` is unused by Ladder."""

    variant: str = "staircase"
    N: int = 2
    C: int = 8
    M: int | None = None
    S: int = 64
    segment_len: int = 128

    def __post_init__(self):
        if self.M is None:
            object.__setattr__(self, "M", self.N)

    @property
    def step_size(self) -> int:
        return self.N * self.C

    @property
    def freezes(self) -> bool:
        """Whether chunks enter the key/value cache after ``M`` passes."""
        if self.variant == "global_cached_staircase":
            return True
        return self.variant == "cached_staircase" and self.M < self.N

    @property
    def passes(self) -> int:
        """Core passes each token receives."""
        if self.variant in ("cached_staircase", "global_cached_staircase"):
            return self.M
        return self.N

    def problems(self, strict: bool = True) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
            return out
        for name in ("N", "C", "S", "segment_len"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.M <= self.N:
            out.append(f"M must satisfy 1 <= M <= N, got M={self.M}, N={self.N}")
        if self.variant == "cached_staircase" and strict and self.M >= self.N:
            out.append(f"cached_staircase requires M < N (got M={self.M}, N={self.N})")
        if self.variant == "staircase" and self.M != self.N:
            out.append(f"staircase does not cache: M must equal N (got M={self.M}, N={self.N})")
        if self.variant == "baseline_xl" and self.N != 1:
            out.append(f"baseline_xl is a ladder with N=1 (got N={self.N})")
        return out

    def validate(self, strict: bool = True) -> "VariantConfig":
        """Raise ``ConfigError`` naming every violated invariant.

        ``strict=False`` admits the degenerate ``cached_staircase`` with
        ``M == N`` used by equivalence checks.
        """
        probs = self.problems(strict)
        if probs:
            raise ConfigError("; ".join(probs))
        return self


@dataclass
class ChunkState:
    index: int
    pass_count: int
    block: HiddenBlock
    frozen: bool = False

    @property
    def size(self) -> int:
        return self.block.positions.numel()


@dataclass
class StaircaseWindow:
    active: list[ChunkState] = field(default_factory=list)
    frozen_cache: list[ChunkState] = field(default_factory=list)
    newest_index: int = -1

    def active_tokens(self) -> int:
        return sum(c.size for c in self.active)

    def check(self, cfg: VariantConfig) -> None:
        passes = [c.pass_count for c in self.active]
        if any(a <= b for a, b in zip(passes, passes[1:])):
            raise SchedulerError(f"active pass counts not strictly decreasing: {passes}")
        if self.active_tokens() > cfg.step_size:
            raise SchedulerError(
                f"window overflow: {self.active_tokens()} active tokens > N*C = {cfg.step_size}"
            )


def build_chunks(h: torch.Tensor, C: int, offset: int = 0) -> list[ChunkState]:
    """Split embedded states ``[B, T, d]`` into chunks of ``C`` (last may be short)."""
    if C < 1:
        raise ConfigError(f"chunk size C must be >= 1, got {C}")
    T = h.shape[1]
    chunks = []
    for i, start in enumerate(range(0, T, C)):
        stop = min(start + C, T)
        pos = torch.arange(start + offset, stop + offset)
        chunks.append(ChunkState(i, 0, HiddenBlock(h[:, start:stop], pos)))
    return chunks


def staircase_step(
    window: StaircaseWindow,
    new_chunk: ChunkState | None,
    core: TransCore,
    cfg: VariantConfig,
    fc: ForwardContext,
) -> tuple[StaircaseWindow, list[ChunkState]]:
    """Advance the window by one step; returns it with the chunks that matured.

    ``new_chunk=None`` is a drain step. Frozen chunks stay attendable while they
    are within ``N`` chunks of the newest ingested one (forever in the global
    variant).
    """
    if new_chunk is not None:
        if new_chunk.pass_count != 0:
            raise SchedulerError(f"new chunk {new_chunk.index} already has {new_chunk.pass_count} passes")
        window.active.append(new_chunk)
        window.newest_index = new_chunk.index
    if cfg.variant != "global_cached_staircase":
        oldest = window.newest_index - cfg.N + 1
        window.frozen_cache = [c for c in window.frozen_cache if c.index >= oldest]
    window.check(cfg)
    if not window.active:
        return window, []

    x = torch.cat([c.block.states for c in window.active], dim=1)
    pos = torch.cat([c.block.positions for c in window.active])
    prefix = prefix_pos = None
    if window.frozen_cache:
        prefix = torch.cat([c.block.states for c in window.frozen_cache], dim=1)
        prefix_pos = torch.cat([c.block.positions for c in window.frozen_cache])
        if fc.counters is not None:
            for c in window.frozen_cache:
                fc.counters.frozen_hashes.setdefault(c.index, []).append(
                    hash(c.block.states.detach().numpy().tobytes())
                )
    out = core.trans_core(x, pos, prefix, prefix_pos, fc=fc)

    matured, still_active, start = [], [], 0
    limit = cfg.passes
    for c in window.active:
        c.block = HiddenBlock(out[:, start:start + c.size], c.block.positions)
        start += c.size
        c.pass_count += 1
        if c.pass_count >= limit:
            matured.append(c)
            if cfg.freezes:
                # the cache keeps a detached copy; the live states are the chunk's output
                frozen = HiddenBlock(c.block.states.detach(), c.block.positions)
                window.frozen_cache.append(ChunkState(c.index, c.pass_count, frozen, frozen=True))
        else:
            still_active.append(c)
    window.active = still_active
    return window, matured


class RunResult(NamedTuple):
    logits: torch.Tensor
    hidden: torch.Tensor
    counters: Counters | None


def _run_stair(core: TransCore, h: torch.Tensor, cfg: VariantConfig, fc: ForwardContext) -> torch.Tensor:
    chunks = build_chunks(h, cfg.C)
    outputs: list[torch.Tensor | None] = [None] * len(chunks)
    window = StaircaseWindow()
    boundary = cfg.segment_len
    queue = iter(chunks)
    pending = len(chunks)
    while pending or window.active:
        new = next(queue, None) if pending else None
        if new is not None:
            pending -= 1
            start = int(new.block.positions[0])
            if start >= boundary:
                # truncated backprop: carry values, cut the graph
                for c in window.active:
                    c.block = HiddenBlock(c.block.states.detach(), c.block.positions)
                while boundary <= start:
                    boundary += cfg.segment_len
        window, matured = staircase_step(window, new, core, cfg, fc)
        for c in matured:
            outputs[c.index] = c.block.states
    if not outputs:
        return h
    return torch.cat(outputs, dim=1)


def _run_ladder(core: TransCore, h: torch.Tensor, cfg: VariantConfig, fc: ForwardContext) -> torch.Tensor:
    T = h.shape[1]
    apps = len(core.order)
    keep = cfg.S - 1
    caches: list[list[torch.Tensor | None]] = [[None] * apps for _ in range(cfg.N)]
    cache_pos = torch.empty(0, dtype=torch.long)
    outs = []
    for a in range(0, T, cfg.segment_len):
        b = min(a + cfg.segment_len, T)
        x = h[:, a:b]
        pos = torch.arange(a, b)
        for n in range(cfg.N):
            x, inputs = core.trans_core(
                x, pos, caches[n], cache_pos, span=cfg.S, fc=fc, return_layer_inputs=True
            )
            if keep:
                for app in range(apps):
                    old = caches[n][app]
                    full = inputs[app] if old is None else torch.cat([old, inputs[app]], dim=1)
                    caches[n][app] = full[:, -keep:].detach()
        if keep:
            cache_pos = torch.cat([cache_pos, pos])[-keep:]
        outs.append(x)
    if not outs:
        return h
    return torch.cat(outs, dim=1)


def run_variant(
    tokens: torch.Tensor,
    cfg: VariantConfig,
    core: TransCore,
    fc: ForwardContext | None = None,
    strict: bool = True,
) -> RunResult:
    """Full-sequence logits ``[B, T, V]`` for any variant, plus instrumentation.

    Position ``t`` of the output depends only on tokens ``0..t``. Outputs are the
    matured (final-pass) states only.
    """
    cfg.validate(strict)
    fc = fc or ForwardContext()
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    h = core.f_in(tokens, fc)
    if cfg.variant in STAIR_VARIANTS:
        out = _run_stair(core, h, cfg, fc)
    else:
        out = _run_ladder(core, h, cfg, fc)
    return RunResult(core.f_out(out), out, fc.counters)


def instrumented(cfg: VariantConfig, core: TransCore, tokens: torch.Tensor, strict: bool = True) -> Counters:
    """Run once in eval mode purely to collect work counters."""
    counters = Counters()
    with torch.no_grad():
        run_variant(tokens, cfg, core, ForwardContext(counters=counters), strict=strict)
    return counters


def as_baseline(cfg: VariantConfig) -> VariantConfig:
    return replace(cfg, variant="baseline_xl", N=1, M=1)
