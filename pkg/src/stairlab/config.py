"""Run configuration: four sections (model, variant, task, train) in one YAML file.

Unknown keys are errors and the resolved snapshot spells out every field, so a
run directory always records exactly what produced it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .schedule import VariantConfig
from .tasks import AlgorithmSpec, RandomWalkSpec
from .transcore import CoreConfig

TASK_KINDS = ("random_walk", "algorithm", "char_corpus")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_rel_pos: int = 64
    layer_pattern: str = ""
    tie_embeddings: bool = False

    def core(self, vocab_size: int) -> CoreConfig:
        return CoreConfig(vocab_size=vocab_size, **asdict(self))


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "random_walk"
    seq_len: int = 100
    grid_w: int = 8
    grid_h: int = 8
    wrap: bool = True
    n_vars: int = 3
    value_range: int = 10
    episodes_per_sequence: int = 1
    eval_episodes: int = 256
    corpus_path: str = ""
    max_bytes: int = 0
    split_fracs: tuple[float, float, float] = (0.9, 0.05, 0.05)

    def validate(self) -> "TaskConfig":
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {', '.join(TASK_KINDS)}, got {self.kind!r}")
        if self.kind == "char_corpus" and not self.corpus_path:
            raise ConfigError("task.corpus_path is required for char_corpus")
        if self.seq_len < 1 or self.episodes_per_sequence < 1 or self.eval_episodes < 1:
            raise ConfigError("task.seq_len, episodes_per_sequence and eval_episodes must be >= 1")
        return self

    def random_walk_spec(self) -> RandomWalkSpec:
        return RandomWalkSpec(self.grid_w, self.grid_h, self.seq_len, self.wrap)

    def algorithm_spec(self) -> AlgorithmSpec:
        return AlgorithmSpec(self.n_vars, self.value_range, self.seq_len)


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 3000
    batch_size: int = 32
    clip_norm: float = 0.1
    dropout: float = 0.0
    embed_dropout: float = 0.0
    segment_len: int = 128
    seed: int = 1
    eval_every: int = 500
    weight_decay: float = 0.0
    label_smoothing: float = 0.0

    def validate(self) -> "TrainConfig":
        probs = []
        if not 0 <= self.warmup_steps <= self.total_steps:
            probs.append(f"warmup_steps ({self.warmup_steps}) must be in [0, total_steps={self.total_steps}]")
        for name in ("dropout", "embed_dropout", "weight_decay", "label_smoothing"):
            if not 0.0 <= getattr(self, name) < 1.0:
                probs.append(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.clip_norm <= 0:
            probs.append(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.lr_peak <= 0:
            probs.append("lr_peak must be > 0")
        for name in ("batch_size", "segment_len", "eval_every"):
            if getattr(self, name) < 1:
                probs.append(f"{name} must be >= 1")
        if self.label_smoothing:
            probs.append("label_smoothing is exposed for completeness but not implemented; leave it at 0")
        if probs:
            raise ConfigError("; ".join(probs))
        return self


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.task.validate()
        self.train.validate()
        self.variant.validate()
        if self.variant.segment_len != self.train.segment_len:
            raise ConfigError("variant.segment_len must equal train.segment_len")
        return self

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for section in ("model", "variant", "task", "train"):
            d = asdict(getattr(self, section))
            out[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with per-section field overrides, e.g. ``replace(variant={"N": 4})``.

        An ``M`` that merely followed ``N`` keeps following it.
        """
        base = self.to_dict()
        variant = sections.get("variant", {})
        if "N" in variant and "M" not in variant and self.variant.M == self.variant.N:
            base["variant"].pop("M")
        return from_dict(_merge(base, sections))


def _merge(base: dict, over: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, values in over.items():
        out.setdefault(section, {}).update(values)
    return out


_SECTIONS = {"model": ModelConfig, "variant": VariantConfig, "task": TaskConfig, "train": TrainConfig}


def _build(section: str, cls, values: dict[str, Any]):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section [{section}] must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    values = dict(values)
    if "split_fracs" in values:
        values["split_fracs"] = tuple(values["split_fracs"])
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def from_dict(data: dict[str, Any]) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    train = _build("train", TrainConfig, data.get("train"))
    variant_values = dict(data.get("variant") or {})
    variant_values.setdefault("segment_len", train.segment_len)
    cfg = RunConfig(
        model=_build("model", ModelConfig, data.get("model")),
        variant=_build("variant", VariantConfig, variant_values),
        task=_build("task", TaskConfig, data.get("task")),
        train=train,
    )
    return cfg.validate()


def profile_names() -> list[str]:
    root = resources.files("stairlab") / "profiles"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load(path_or_profile: str | Path) -> RunConfig:
    """Load a YAML config file, or a bundled profile by name (e.g. ``rw-staircase-n2``)."""
    path = Path(path_or_profile)
    if path.exists():
        text = path.read_text()
    else:
        res = resources.files("stairlab") / "profiles" / f"{path_or_profile}.yaml"
        if not res.is_file():
            raise ConfigError(
                f"no config file or profile named {str(path_or_profile)!r}; "
                f"profiles: {', '.join(profile_names())}"
            )
        text = res.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of sections")
    return from_dict(data)
