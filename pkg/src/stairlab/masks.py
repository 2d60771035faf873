"""Attention masks keyed on absolute token positions."""

from __future__ import annotations

import contextlib

import torch

_FAULT = {"leak": 0}


@contextlib.contextmanager
def inject_mask_fault(leak: int = 1):
    """Test hook: let every query see ``leak`` positions into its future."""
    old = _FAULT["leak"]
    _FAULT["leak"] = leak
    try:
        yield
    finally:
        _FAULT["leak"] = old


def build_step_mask(
    query_positions: torch.Tensor,
    key_positions: torch.Tensor,
    span: int | None = None,
) -> torch.Tensor:
    """Boolean ``[q, k]`` mask: query at ``p`` may attend key at ``p'`` iff ``p' <= p``.

    With ``span`` set, keys must also satisfy ``p - p' < span``.
    Keys without a matching query (cached states) simply never query.
    """
    diff = query_positions[:, None] - key_positions[None, :]
    allowed = diff >= -_FAULT["leak"]
    if span is not None:
        allowed &= diff < span
    return allowed
