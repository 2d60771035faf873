"""Shared decoder-only Transformer core.

One set of weights (input embedding, ``L`` pre-norm layers, output projection)
is reused by every scheduling variant. Self-attention uses learned relative
position key offsets indexed by the clipped difference of absolute positions,
so only position differences ever reach the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import rng
from .errors import ConfigError, DimensionError, VocabularyError
from .instrument import Counters
from .masks import build_step_mask
from .numerics import dropout, layer_norm, matmul, softmax_rows


@dataclass(frozen=True)
class CoreConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_rel_pos: int = 64
    layer_pattern: str = ""
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_rel_pos"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"n_heads={self.n_heads} must divide d_model={self.d_model}"
            )
        self.layer_order()

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def layer_order(self) -> list[int]:
        """Layer indices in application order; 'AABB' -> [0, 0, 1, 1]."""
        pattern = self.layer_pattern or "".join(chr(ord("A") + i) for i in range(self.n_layers))
        order = []
        for ch in pattern:
            idx = ord(ch.upper()) - ord("A")
            if not ch.isalpha() or not 0 <= idx < self.n_layers:
                raise ConfigError(
                    f"layer_pattern {pattern!r} references layer {ch!r}, "
                    f"but the core has only {self.n_layers} layer(s)"
                )
            order.append(idx)
        return order


def param_count(cfg: CoreConfig) -> int:
    """Closed-form number of learnable scalars; depends only on core hyperparameters."""
    V, d, ff = cfg.vocab_size, cfg.d_model, cfg.d_ff
    per_layer = 2 * d + 4 * d * d + 2 * d + (d * ff + ff + ff * d + d)
    total = V * d + cfg.n_layers * per_layer + (2 * cfg.max_rel_pos + 1) * cfg.d_head
    total += 2 * d + V
    if not cfg.tie_embeddings:
        total += d * V
    return total


@dataclass
class ForwardContext:
    """Per-call runtime switches: dropout, its generator, instrumentation."""

    training: bool = False
    dropout: float = 0.0
    embed_dropout: float = 0.0
    generator: torch.Generator | None = None
    counters: Counters | None = None

    def drop(self, x: torch.Tensor, p: float | None = None) -> torch.Tensor:
        return dropout(x, self.dropout if p is None else p, self.generator, self.training)


@dataclass
class HiddenBlock:
    states: torch.Tensor  # [B, t, d]
    positions: torch.Tensor  # [t], strictly increasing

    def __post_init__(self):
        if self.positions.numel() > 1 and not bool((self.positions.diff() > 0).all()):
            raise ValueError("HiddenBlock positions must be strictly increasing")


@dataclass
class AttentionContext:
    """Queries are the trailing rows of ``kv``; the leading ``frozen_prefix`` rows only serve as keys."""

    query_positions: torch.Tensor
    key_positions: torch.Tensor
    mask: torch.Tensor
    prefix: torch.Tensor | None = None

    @property
    def frozen_prefix(self) -> int:
        return 0 if self.prefix is None else self.prefix.shape[1]


class CoreLayer(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.ln1_g = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.wq = nn.Parameter(torch.empty(d, d))
        self.wk = nn.Parameter(torch.empty(d, d))
        self.wv = nn.Parameter(torch.empty(d, d))
        self.wo = nn.Parameter(torch.empty(d, d))
        self.ln2_g = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.w1 = nn.Parameter(torch.empty(d, d_ff))
        self.b1 = nn.Parameter(torch.zeros(d_ff))
        self.w2 = nn.Parameter(torch.empty(d_ff, d))
        self.b2 = nn.Parameter(torch.zeros(d))


class TransCore(nn.Module):
    """All learnable weights: ``f_in`` table, layer stack, relative offsets, ``f_out``."""

    def __init__(self, cfg: CoreConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        d, V = cfg.d_model, cfg.vocab_size
        self.order = cfg.layer_order()
        self.embed = nn.Parameter(torch.empty(V, d))
        self.layers = nn.ModuleList(CoreLayer(d, cfg.d_ff) for _ in range(cfg.n_layers))
        self.rel_pos = nn.Parameter(torch.empty(2 * cfg.max_rel_pos + 1, cfg.d_head))
        self.lnf_g = nn.Parameter(torch.ones(d))
        self.lnf_b = nn.Parameter(torch.zeros(d))
        self.out_proj = None if cfg.tie_embeddings else nn.Parameter(torch.empty(d, V))
        self.out_bias = nn.Parameter(torch.zeros(V))
        self.reset_parameters(seed)
        self.to(dtype)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = rng.substream(seed, "init")
        d, ff = self.cfg.d_model, self.cfg.d_ff

        def normal(p: torch.Tensor, std: float) -> None:
            p.copy_(torch.from_numpy(gen.normal(0.0, std, size=tuple(p.shape))))

        normal(self.embed, d**-0.5)
        resid_std = d**-0.5 / math.sqrt(2 * len(self.order))
        for layer in self.layers:
            for w in (layer.wq, layer.wk, layer.wv):
                normal(w, d**-0.5)
            normal(layer.wo, resid_std)
            normal(layer.w1, d**-0.5)
            normal(layer.w2, ff**-0.5 / math.sqrt(2 * len(self.order)))
        normal(self.rel_pos, self.cfg.d_head**-0.5)
        if self.out_proj is not None:
            # small readout so a fresh model predicts close to uniform
            normal(self.out_proj, 0.1 * d**-0.5)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.dtype

    def named_trainables(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    # -- f_in / f_out -------------------------------------------------

    def f_in(self, tokens: torch.Tensor, fc: ForwardContext | None = None) -> torch.Tensor:
        """Embed token ids ``[B, T]`` to ``[B, T, d]`` scaled by sqrt(d)."""
        fc = fc or ForwardContext()
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.numel() and (int(tokens.max()) >= self.cfg.vocab_size or int(tokens.min()) < 0):
            raise VocabularyError(
                f"token id outside vocabulary [0, {self.cfg.vocab_size})"
            )
        h = self.embed[tokens] * math.sqrt(self.cfg.d_model)
        return fc.drop(h, fc.embed_dropout)

    def f_out(self, h: torch.Tensor) -> torch.Tensor:
        """Final layer norm then projection to vocabulary logits."""
        h = layer_norm(h, self.lnf_g, self.lnf_b)
        w = self.embed.t() if self.out_proj is None else self.out_proj
        return matmul(h, w) + self.out_bias

    # -- sublayers ----------------------------------------------------

    def self_attention_sublayer(
        self, x: torch.Tensor, layer: CoreLayer, ctx: AttentionContext, fc: ForwardContext
    ) -> torch.Tensor:
        B, q, d = x.shape
        H, dh, R = self.cfg.n_heads, self.cfg.d_head, self.cfg.max_rel_pos
        kv_in = x if ctx.prefix is None else torch.cat([ctx.prefix.detach(), x], dim=1)
        k = kv_in.shape[1]
        if ctx.mask.shape != (q, k):
            raise DimensionError(f"attention mask {tuple(ctx.mask.shape)} for {q} queries and {k} keys")
        hq = layer_norm(x, layer.ln1_g, layer.ln1_b)
        hkv = hq if ctx.prefix is None else layer_norm(kv_in, layer.ln1_g, layer.ln1_b)
        Q = (matmul(hq, layer.wq) / math.sqrt(dh)).view(B, q, H, dh).transpose(1, 2)
        K = matmul(hkv, layer.wk).view(B, k, H, dh).transpose(1, 2)
        Vv = matmul(hkv, layer.wv).view(B, k, H, dh).transpose(1, 2)

        offsets = (ctx.query_positions[:, None] - ctx.key_positions[None, :]).clamp(-R, R) + R
        rel_scores = matmul(Q, self.rel_pos.t())  # [B, H, q, 2R+1]
        rel = rel_scores.gather(-1, offsets.expand(B, H, q, k))
        scores = matmul(Q, K.transpose(-1, -2)) + rel
        attn = softmax_rows(scores, ctx.mask)
        if fc.counters is not None:
            fc.counters.record_attention(ctx.mask)
        attn = fc.drop(attn)
        out = matmul(attn, Vv).transpose(1, 2).reshape(B, q, d)
        return x + fc.drop(matmul(out, layer.wo))

    def feedforward_sublayer(self, x: torch.Tensor, layer: CoreLayer, fc: ForwardContext) -> torch.Tensor:
        h = layer_norm(x, layer.ln2_g, layer.ln2_b)
        h = torch.relu(matmul(h, layer.w1) + layer.b1)
        if fc.counters is not None:
            fc.counters.record_feedforward(x.shape[1])
        return x + fc.drop(matmul(h, layer.w2) + layer.b2)

    # -- full core ----------------------------------------------------

    def trans_core(
        self,
        x: torch.Tensor,
        positions: torch.Tensor,
        prefix: torch.Tensor | Sequence[torch.Tensor | None] | None = None,
        prefix_positions: torch.Tensor | None = None,
        span: int | None = None,
        fc: ForwardContext | None = None,
        return_layer_inputs: bool = False,
    ):
        """Run the layer stack over query states ``x`` ``[B, q, d]``.

        ``prefix`` holds key/value-only states preceding the queries: one tensor
        shared by every layer (frozen staircase cache) or one entry per layer
        application (segment caches). Prefix states never receive gradient.
        """
        fc = fc or ForwardContext()
        if prefix_positions is None:
            prefix_positions = positions.new_empty(0)
        key_positions = torch.cat([prefix_positions, positions])
        if key_positions.numel() > 1 and not bool((key_positions.diff() > 0).all()):
            raise ValueError("trans_core: key positions must be strictly increasing")
        mask = build_step_mask(positions, key_positions, span)
        per_app = isinstance(prefix, (list, tuple))
        n_prefix = prefix_positions.numel()
        if fc.counters is not None:
            fc.counters.begin_core_call(positions, key_positions.numel())
        layer_inputs = []
        for app, idx in enumerate(self.order):
            layer = self.layers[idx]
            p = prefix[app] if per_app else prefix
            if n_prefix == 0:
                p = None
            ctx = AttentionContext(positions, key_positions, mask, p)
            layer_inputs.append(x)
            x = self.self_attention_sublayer(x, layer, ctx, fc)
            x = self.feedforward_sublayer(x, layer, fc)
        if return_layer_inputs:
            return x, layer_inputs
        return x

    def forward(self, tokens: torch.Tensor, fc: ForwardContext | None = None) -> torch.Tensor:
        """Plain causal Transformer over ``tokens``: logits ``[B, T, V]``."""
        h = self.f_in(tokens, fc)
        pos = torch.arange(h.shape[1])
        return self.f_out(self.trans_core(h, pos, fc=fc))
