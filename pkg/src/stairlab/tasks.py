"""State-tracking task generators and character-corpus ingestion.

Episodes are pure functions of ``(spec, seed, split, index)``: each one draws
from its own named random substream, so any episode can be regenerated on its
own and generation order never matters.

Random Walk vocabulary: ``0`` separator, ``1..3`` actions (FORWARD, TURN_LEFT,
TURN_RIGHT), then one token per grid cell (``4 + y * grid_w + x``). The agent
starts at ``(0, 0)`` facing ``+y``; turning is in place.

Algorithm vocabulary: ``0`` separator, ``1..R`` value tokens (value ``k`` is
token ``1 + k``), then one token per concrete operation
(``set v k``, ``add v w``, ``sub v w``, ``swap v w``, ``query v``). Arithmetic
wraps modulo the value range; all variables start at 0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .errors import IngestionError, SpecError
from .numerics import IGNORE_INDEX

SEP = 0
FORWARD, TURN_LEFT, TURN_RIGHT = 1, 2, 3
ACTIONS = (FORWARD, TURN_LEFT, TURN_RIGHT)
# heading index -> (dx, dy); turning left is counter-clockwise
HEADINGS = ((0, 1), (-1, 0), (0, -1), (1, 0))
VAR_NAMES = "xyzwuv"


def spec_hash(spec) -> str:
    """Short content hash of a task spec; it fixes the vocabulary."""
    payload = json.dumps({"kind": type(spec).__name__, **asdict(spec)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class TokenSequence:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.shape != self.targets.shape:
            raise ValueError("inputs and targets must align")

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class Episode:
    inputs: list[int]
    targets: list[int]
    seed: int
    index: int
    spec_hash: str

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("episode inputs and targets must have equal length")


# -- Random Walk ---------------------------------------------------------------


@dataclass(frozen=True)
class RandomWalkSpec:
    grid_w: int = 8
    grid_h: int = 8
    seq_len: int = 100
    wrap: bool = True

    def validate(self) -> "RandomWalkSpec":
        if self.grid_w < 1 or self.grid_h < 1 or self.grid_w * self.grid_h < 2:
            raise SpecError(f"grid {self.grid_w}x{self.grid_h} needs at least 2 cells")
        if self.seq_len < 1:
            raise SpecError("seq_len must be positive")
        return self

    @property
    def n_locations(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def vocab_size(self) -> int:
        return 4 + self.n_locations

    def location_token(self, x: int, y: int) -> int:
        return 4 + y * self.grid_w + x

    def move(self, x: int, y: int, heading: int, action: int) -> tuple[int, int, int]:
        if action == TURN_LEFT:
            return x, y, (heading + 1) % 4
        if action == TURN_RIGHT:
            return x, y, (heading - 1) % 4
        dx, dy = HEADINGS[heading]
        nx, ny = x + dx, y + dy
        if self.wrap:
            return nx % self.grid_w, ny % self.grid_h, heading
        if 0 <= nx < self.grid_w and 0 <= ny < self.grid_h:
            return nx, ny, heading
        return x, y, heading


def random_walk_episode(spec: RandomWalkSpec, seed: int, index: int, split: str = "train") -> Episode:
    gen = rng.substream(seed, f"random_walk/{split}/{index}")
    actions = gen.choice(np.array(ACTIONS), size=spec.seq_len).tolist()
    x = y = heading = 0
    targets = []
    for a in actions:
        x, y, heading = spec.move(x, y, heading, a)
        targets.append(spec.location_token(x, y))
    return Episode(actions, targets, seed, index, spec_hash(spec))


def gen_random_walk(
    spec: RandomWalkSpec, seed: int, count: int, start: int = 0, split: str = "train"
) -> list[Episode]:
    spec.validate()
    return [random_walk_episode(spec, seed, i, split) for i in range(start, start + count)]


# -- Algorithm -----------------------------------------------------------------


@dataclass(frozen=True)
class AlgorithmSpec:
    n_vars: int = 3
    value_range: int = 10
    seq_len: int = 100
    op_kinds: tuple[str, ...] = ("set", "add", "sub", "swap", "query")

    def validate(self) -> "AlgorithmSpec":
        if not 1 <= self.n_vars <= len(VAR_NAMES):
            raise SpecError(f"n_vars must be in [1, {len(VAR_NAMES)}]")
        if self.value_range < 2 or self.seq_len < 1:
            raise SpecError("value_range must be >= 2 and seq_len >= 1")
        if "query" not in self.op_kinds or not set(self.op_kinds) <= {"set", "add", "sub", "swap", "query"}:
            raise SpecError(f"unsupported op set {self.op_kinds}")
        if "swap" in self.op_kinds and self.n_vars < 2:
            raise SpecError("swap needs at least two variables")
        return self

    def ops(self) -> list[tuple]:
        """Every concrete operation; an op's token is ``op_base + its index``."""
        n, R = self.n_vars, self.value_range
        table = []
        for kind in self.op_kinds:
            if kind == "set":
                table += [("set", v, k) for v in range(n) for k in range(R)]
            elif kind in ("add", "sub"):
                table += [(kind, v, w) for v in range(n) for w in range(n)]
            elif kind == "swap":
                table += [("swap", v, w) for v in range(n) for w in range(v + 1, n)]
            else:
                table += [("query", v) for v in range(n)]
        return table

    @property
    def op_base(self) -> int:
        return 1 + self.value_range

    @property
    def vocab_size(self) -> int:
        return self.op_base + len(self.ops())

    def value_token(self, value: int) -> int:
        return 1 + value

    def render(self, op: tuple) -> str:
        name = lambda v: VAR_NAMES[v]
        if op[0] == "set":
            return f"{name(op[1])}<-{op[2]}"
        if op[0] == "query":
            return f"query {name(op[1])}"
        sym = {"add": "+", "sub": "-"}.get(op[0])
        if sym:
            return f"{name(op[1])}<-{name(op[1])}{sym}{name(op[2])}"
        return f"swap {name(op[1])} {name(op[2])}"


class Interpreter:
    """Reference executor for the Algorithm operation set."""

    def __init__(self, spec: AlgorithmSpec):
        self.spec = spec
        self.values = [0] * spec.n_vars

    def execute(self, op: tuple) -> int | None:
        R = self.spec.value_range
        vals = self.values
        kind = op[0]
        if kind == "set":
            vals[op[1]] = op[2] % R
        elif kind == "add":
            vals[op[1]] = (vals[op[1]] + vals[op[2]]) % R
        elif kind == "sub":
            vals[op[1]] = (vals[op[1]] - vals[op[2]]) % R
        elif kind == "swap":
            vals[op[1]], vals[op[2]] = vals[op[2]], vals[op[1]]
        elif kind == "query":
            return vals[op[1]]
        else:
            raise SpecError(f"unknown op {op!r}")
        return None

    def run(self, ops: Iterable[tuple]) -> list[int | None]:
        return [self.execute(op) for op in ops]


def algorithm_episode(spec: AlgorithmSpec, seed: int, index: int, split: str = "train") -> Episode:
    gen = rng.substream(seed, f"algorithm/{split}/{index}")
    table = spec.ops()
    by_kind: dict[str, list[int]] = {}
    for i, op in enumerate(table):
        by_kind.setdefault(op[0], []).append(i)
    kinds = list(spec.op_kinds)
    chosen = []
    for k in gen.integers(0, len(kinds), size=spec.seq_len).tolist():
        members = by_kind[kinds[k]]
        chosen.append(members[int(gen.integers(0, len(members)))])
    results = Interpreter(spec).run(table[i] for i in chosen)
    inputs = [spec.op_base + i for i in chosen]
    targets = [IGNORE_INDEX if r is None else spec.value_token(r) for r in results]
    return Episode(inputs, targets, seed, index, spec_hash(spec))


def gen_algorithm(
    spec: AlgorithmSpec, seed: int, count: int, start: int = 0, split: str = "train"
) -> list[Episode]:
    spec.validate()
    return [algorithm_episode(spec, seed, i, split) for i in range(start, start + count)]


def decode_algorithm(spec: AlgorithmSpec, tokens: Sequence[int]) -> list[tuple]:
    table = spec.ops()
    return [table[t - spec.op_base] for t in tokens]


# -- packing and episode files -------------------------------------------------


def pack_episodes(episodes: Sequence[Episode], sep: int = SEP) -> TokenSequence:
    """Concatenate episodes with a separator whose target is ignored."""
    inputs: list[int] = []
    targets: list[int] = []
    for k, ep in enumerate(episodes):
        if k:
            inputs.append(sep)
            targets.append(IGNORE_INDEX)
        inputs += ep.inputs
        targets += ep.targets
    return TokenSequence(inputs, targets)


EPISODE_FORMAT = "stairlab-episodes v1"


def write_episodes(path: str | Path, episodes: Sequence[Episode], task: str) -> None:
    """Write one tab-separated record per episode.

    Columns: seed, episode index, input ids, target ids (``_`` marks an
    unsupervised position). A ``#`` header line names the task and spec hash.
    """
    digest = episodes[0].spec_hash if episodes else "-"
    lines = [f"# {EPISODE_FORMAT} task={task} spec={digest} count={len(episodes)}"]
    for ep in episodes:
        tgt = " ".join("_" if t == IGNORE_INDEX else str(t) for t in ep.targets)
        lines.append(f"{ep.seed}\t{ep.index}\t{' '.join(map(str, ep.inputs))}\t{tgt}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_episodes(path: str | Path) -> tuple[dict[str, str], list[Episode]]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(f"# {EPISODE_FORMAT}"):
        raise IngestionError(f"{path}: missing '{EPISODE_FORMAT}' header")
    meta = dict(part.split("=", 1) for part in text[0][2:].split() if "=" in part)
    episodes = []
    for n, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise IngestionError(f"{path}:{n}: expected 4 tab-separated columns, got {len(cols)}")
        inputs = [int(t) for t in cols[2].split()]
        targets = [IGNORE_INDEX if t == "_" else int(t) for t in cols[3].split()]
        episodes.append(Episode(inputs, targets, int(cols[0]), int(cols[1]), meta.get("spec", "-")))
    return meta, episodes


# -- character corpus ----------------------------------------------------------


@dataclass
class CharCorpus:
    vocab: list[int]  # byte values, sorted; token id = position in this list
    train: TokenSequence
    valid: TokenSequence
    test: TokenSequence

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def vocab_hash(self) -> str:
        return hashlib.sha256(bytes(self.vocab)).hexdigest()[:16]


def load_char_corpus(
    path: str | Path, split_fracs: Sequence[float] = (0.9, 0.05, 0.05), max_bytes: int | None = None
) -> CharCorpus:
    """Byte-level corpus split contiguously in file order; targets are next bytes."""
    data = Path(path).read_bytes()
    if max_bytes is not None:
        data = data[:max_bytes]
    if not data:
        raise IngestionError(f"{path}: corpus is empty")
    if len(split_fracs) != 3 or abs(sum(split_fracs) - 1.0) > 1e-9 or min(split_fracs) < 0:
        raise IngestionError(f"split fractions must be three non-negatives summing to 1, got {split_fracs}")
    raw = np.frombuffer(data, dtype=np.uint8)
    vocab = np.unique(raw)
    lookup = np.zeros(256, dtype=np.int64)
    lookup[vocab] = np.arange(len(vocab))
    ids = lookup[raw]
    n = len(ids) - 1  # number of (input, next) pairs
    cut1 = int(round(n * split_fracs[0]))
    cut2 = cut1 + int(round(n * split_fracs[1]))

    def part(a: int, b: int) -> TokenSequence:
        return TokenSequence(ids[a:b], ids[a + 1:b + 1])

    return CharCorpus(vocab.tolist(), part(0, cut1), part(cut1, cut2), part(cut2, n))
