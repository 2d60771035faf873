"""Named, counter-based random substreams.

Every stochastic site (parameter init, dropout, data generation) asks for its
own substream keyed by ``(seed, name)``. The underlying bit generator is
Philox, so a substream is fully determined by its key and never depends on
how many draws other sites made.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def _key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent numpy generator for ``name`` under ``seed``."""
    return np.random.Generator(np.random.Philox(key=_key(seed, name)))


def torch_generator(seed: int, name: str) -> torch.Generator:
    """Return a CPU torch generator seeded from the ``(seed, name)`` substream."""
    g = torch.Generator()
    g.manual_seed(_key(seed, name) & _MASK64 >> 1)
    return g
