"""Dense-tensor primitives, optimizer and gradient oracle.

Tensors are ``torch.Tensor`` values and the reverse-mode tape is torch's
autograd graph: every primitive below is composed from differentiable torch
ops, so a backward rule is recorded whenever an input requires grad. What this
module adds on top is the contract layer (shape and mask validation with
library errors), the optimizer state machine, global-norm clipping and an
independent central-difference gradient oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    DegenerateBatchError,
    DimensionError,
    MaskingError,
    NumericError,
    OraclePreconditionError,
    VocabularyError,
)

Tensor = torch.Tensor

IGNORE_INDEX = -100


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return a @ b


def softmax_rows(x: Tensor, mask: Tensor) -> Tensor:
    """Row softmax over the last axis restricted to ``mask``-allowed entries.

    ``mask`` is boolean (True = allowed) and broadcasts against ``x``.
    Forbidden entries come out exactly zero.
    """
    mask = mask.to(torch.bool)
    rows_ok = mask.any(dim=-1)
    if not bool(rows_ok.all()):
        bad = torch.nonzero(~rows_ok)[0].tolist()
        raise MaskingError(f"softmax_rows: row {bad} has no allowed entry")
    # additive bias is built at mask size, far cheaper than filling the broadcast scores
    bias = torch.zeros(mask.shape, dtype=x.dtype).masked_fill_(~mask, float("-inf"))
    # torch.softmax subtracts the row max internally; exp(-inf) == 0 exactly
    return torch.softmax(x + bias, dim=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.dim() else 0
    if d == 0:
        raise DimensionError("layer_norm: last extent must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {tuple(gain.shape)} / bias {tuple(bias.shape)} "
            f"do not match feature size {d}"
        )
    return F.layer_norm(x, (d,), gain, bias, eps)


def cross_entropy(
    logits: Tensor,
    targets: Tensor,
    ignore_index: int | None = IGNORE_INDEX,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``reduction="mean"`` averages over non-ignored positions, ``"sum"`` sums them.
    """
    V = logits.shape[-1]
    flat_logits = logits.reshape(-1, V)
    flat_targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if flat_targets.numel() != flat_logits.shape[0]:
        raise DimensionError(
            f"cross_entropy: {flat_targets.numel()} targets for "
            f"{flat_logits.shape[0]} logit rows"
        )
    keep = flat_targets != ignore_index if ignore_index is not None else None
    live = flat_targets[keep] if keep is not None else flat_targets
    if live.numel() == 0:
        raise DegenerateBatchError("cross_entropy: every position is ignored")
    if bool(((live < 0) | (live >= V)).any()):
        raise VocabularyError(f"cross_entropy: target outside vocabulary of size {V}")
    ii = ignore_index if ignore_index is not None else IGNORE_INDEX
    return F.cross_entropy(flat_logits, flat_targets, ignore_index=ii, reduction=reduction)


def dropout(x: Tensor, p: float, generator: torch.Generator | None, training: bool) -> Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    first_moment: dict[str, Tensor]
    second_moment: dict[str, Tensor]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8

    @classmethod
    def init(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        return cls(
            first_moment={k: torch.zeros_like(p) for k, p in params.items()},
            second_moment={k: torch.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def check_finite(grads: Mapping[str, Tensor | None]) -> None:
    names = [k for k, g in grads.items() if g is not None]
    flags = torch.stack([torch.isfinite(grads[k]).all() for k in names]) if names else None
    if flags is not None and not bool(flags.all()):
        bad = [k for k, ok in zip(names, flags.tolist()) if not ok]
        raise NumericError(f"non-finite gradient in parameter(s): {', '.join(bad)}")


@torch.no_grad()
def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor | None],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    Parameters whose gradient is ``None`` are left untouched.
    """
    check_finite(grads)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(
                f"adam_step: gradient {tuple(g.shape)} for {name} {tuple(p.shape)}"
            )
        m = state.first_moment[name]
        v = state.second_moment[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.epsilon)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        p.addcdiv_(m, denom, value=-lr / c1)
    return state


@torch.no_grad()
def global_norm(grads: Iterable[Tensor | None]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(g.double().pow(2).sum())
    return math.sqrt(total)


@torch.no_grad()
def clip_global_norm(grads: Sequence[Tensor | None], max_norm: float) -> tuple[Sequence[Tensor | None], float]:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, 1.0
    scale = max_norm / norm
    for g in grads:
        if g is not None:
            g.mul_(scale)
    return grads, scale


def finite_diff_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_coords_per_tensor: int | None = 64,
    seed: int = 0,
) -> float:
    """Compare autograd gradients of ``f`` with central differences.

    ``f`` maps the parameter list to a scalar tensor and must be deterministic.
    Large tensors are probed on a random coordinate subset. Returns
    ``max |g_ad - g_fd| / max(1, |g_fd|)`` over all probed coordinates.
    """
    params = list(params)
    with torch.no_grad():
        first = float(f(params))
        second = float(f(params))
    if first != second:
        raise OraclePreconditionError(
            f"finite_diff_check: f is not deterministic ({first!r} != {second!r})"
        )

    leaves = [p.detach().requires_grad_(True) for p in params]
    out = f(leaves)
    ad = torch.autograd.grad(out, leaves, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, ad):
            g_flat = torch.zeros(p.numel(), dtype=p.dtype) if g is None else g.reshape(-1)
            flat = p.view(-1)
            n = flat.numel()
            if max_coords_per_tensor is None or n <= max_coords_per_tensor:
                coords = range(n)
            else:
                coords = rng.choice(n, size=max_coords_per_tensor, replace=False).tolist()
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = float(f(params))
                flat[i] = orig - epsilon
                down = float(f(params))
                flat[i] = orig
                fd = (up - down) / (2.0 * epsilon)
                err = abs(float(g_flat[i]) - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst
