"""Training loop, evaluation, timing and seed sweeps."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint, rng
from .config import RunConfig, TaskConfig, TrainConfig
from .cost import cost_model
from .errors import ConfigError, DegenerateBatchError, NumericError
from .numerics import IGNORE_INDEX, AdamState, adam_step, clip_global_norm, cross_entropy
from .schedule import VariantConfig, run_variant
from .tasks import (
    CharCorpus,
    algorithm_episode,
    load_char_corpus,
    pack_episodes,
    random_walk_episode,
    spec_hash,
)
from .transcore import CoreConfig, ForwardContext, TransCore

METRICS_HEADER = ["step", "split", "loss", "ppl", "bpc", "error_rate", "batch_time_ms", "qk_pairs", "ff_tokens"]
LN2 = math.log(2.0)


@dataclass
class MetricsRecord:
    step: int
    split: str
    loss: float
    ppl: float
    bpc: float
    error_rate: float
    batch_time_ms: float = 0.0
    qk_pairs: int = 0
    ff_tokens: int = 0

    @classmethod
    def from_nll(cls, step: int, split: str, nll: float, error_rate: float, **kw) -> "MetricsRecord":
        return cls(step, split, nll, math.exp(min(nll, 700.0)), nll / LN2, error_rate, **kw)

    def row(self) -> list:
        return [getattr(self, k) for k in METRICS_HEADER]


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr_peak`` then inverse-square-root decay."""
    if step < 1:
        raise ValueError("lr_schedule: steps are 1-based")
    w = cfg.warmup_steps
    if w == 0:
        return cfg.lr_peak
    return cfg.lr_peak * min(step / w, math.sqrt(w / step))


# -- task streams --------------------------------------------------------------


class EpisodeStream:
    """Random Walk / Algorithm batches, a pure function of ``(seed, step)``."""

    def __init__(self, task: TaskConfig, seed: int):
        self.task = task
        self.seed = seed
        if task.kind == "random_walk":
            self.spec = task.random_walk_spec().validate()
            self._make = random_walk_episode
        else:
            self.spec = task.algorithm_spec().validate()
            self._make = algorithm_episode
        self.vocab_size = self.spec.vocab_size
        self.vocab_hash = spec_hash(self.spec)

    def _sequences(self, split: str, first: int, count: int):
        k = self.task.episodes_per_sequence
        seqs = []
        for s in range(first, first + count):
            eps = [self._make(self.spec, self.seed, s * k + j, split) for j in range(k)]
            seqs.append(pack_episodes(eps))
        inputs = torch.from_numpy(np.stack([s.inputs for s in seqs]))
        targets = torch.from_numpy(np.stack([s.targets for s in seqs]))
        return inputs, targets

    def train_batch(self, step: int, batch_size: int):
        return self._sequences("train", (step - 1) * batch_size, batch_size)

    def eval_data(self, split: str):
        return self._sequences(split, 0, self.task.eval_episodes)


class CorpusStream:
    """Random contiguous windows of a character corpus."""

    def __init__(self, corpus: CharCorpus, seq_len: int, seed: int, eval_rows: int | None = None):
        self.corpus = corpus
        self.seq_len = seq_len
        self.seed = seed
        self.eval_rows = eval_rows
        self.vocab_size = corpus.vocab_size
        self.vocab_hash = corpus.vocab_hash()
        if len(corpus.train) <= seq_len:
            raise ConfigError(f"training split ({len(corpus.train)} tokens) shorter than seq_len {seq_len}")

    def train_batch(self, step: int, batch_size: int):
        gen = rng.substream(self.seed, f"corpus/batch/{step}")
        starts = gen.integers(0, len(self.corpus.train) - self.seq_len + 1, size=batch_size)
        idx = starts[:, None] + np.arange(self.seq_len)[None, :]
        return (
            torch.from_numpy(self.corpus.train.inputs[idx]),
            torch.from_numpy(self.corpus.train.targets[idx]),
        )

    def eval_data(self, split: str):
        seq = getattr(self.corpus, split)
        rows = len(seq) // self.seq_len
        if self.eval_rows is not None:
            rows = min(rows, self.eval_rows)
        if rows == 0:
            raise DegenerateBatchError(f"{split} split shorter than one sequence")
        n = rows * self.seq_len
        return (
            torch.from_numpy(seq.inputs[:n].reshape(rows, self.seq_len)),
            torch.from_numpy(seq.targets[:n].reshape(rows, self.seq_len)),
        )


def make_stream(cfg: RunConfig, seed: int | None = None):
    seed = cfg.train.seed if seed is None else seed
    task = cfg.task
    if task.kind == "char_corpus":
        corpus = load_char_corpus(task.corpus_path, task.split_fracs, task.max_bytes or None)
        return CorpusStream(corpus, task.seq_len, seed, eval_rows=task.eval_episodes)
    return EpisodeStream(task, seed)


# -- evaluation ----------------------------------------------------------------


@torch.no_grad()
def evaluate(
    core: TransCore,
    vcfg: VariantConfig,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    batch_size: int = 64,
    step: int = 0,
    split: str = "valid",
) -> MetricsRecord:
    """Mean NLL and argmax error over supervised positions; dropout is off."""
    if inputs.numel() == 0:
        raise DegenerateBatchError("evaluate: empty evaluation stream")
    total_nll = 0.0
    wrong = 0
    count = 0
    for a in range(0, inputs.shape[0], batch_size):
        x = inputs[a:a + batch_size]
        y = targets[a:a + batch_size]
        logits = run_variant(x, vcfg, core).logits
        live = y != IGNORE_INDEX
        n = int(live.sum())
        if n == 0:
            continue
        total_nll += float(cross_entropy(logits.double(), y, reduction="sum"))
        wrong += int((logits.argmax(-1) != y)[live].sum())
        count += n
    if count == 0:
        raise DegenerateBatchError("evaluate: no supervised positions")
    return MetricsRecord.from_nll(step, split, total_nll / count, wrong / count)


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    losses: list[float]
    core: TransCore
    adam: AdamState
    out_dir: Path | None = None

    def last(self, split: str) -> MetricsRecord | None:
        rows = [r for r in self.records if r.split == split]
        return rows[-1] if rows else None


def _state_arrays(core: TransCore, adam: AdamState, gen: torch.Generator, losses: Sequence[float]):
    arrays = {}
    for name, p in core.named_parameters():
        arrays[f"param/{name}"] = p.detach().numpy()
    for name in adam.first_moment:
        arrays[f"adam_m/{name}"] = adam.first_moment[name].numpy()
        arrays[f"adam_v/{name}"] = adam.second_moment[name].numpy()
    arrays["rng/dropout"] = gen.get_state().numpy()
    arrays["losses"] = np.asarray(losses, dtype=np.float64)
    return arrays


def save_checkpoint(path, cfg: RunConfig, core, adam, gen, step: int, losses, vocab_hash: str = "") -> Path:
    meta = {
        "format": "stairlab-checkpoint",
        "config": cfg.to_dict(),
        "vocab_size": core.cfg.vocab_size,
        "vocab_hash": vocab_hash,
        "step": step,
        "adam": {"step_count": adam.step_count, "beta1": adam.beta1, "beta2": adam.beta2, "epsilon": adam.epsilon},
    }
    return checkpoint.save(path, _state_arrays(core, adam, gen, losses), meta)


def load_checkpoint(path):
    """Rebuild ``(cfg, core, adam, generator, step, losses)`` from a checkpoint file."""
    from .config import from_dict

    arrays, meta = checkpoint.load(path)
    cfg = from_dict(meta["config"])
    core = TransCore(cfg.model.core(meta["vocab_size"]), seed=cfg.train.seed)
    with torch.no_grad():
        for name, p in core.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"param/{name}"]))
    params = core.named_trainables()
    adam = AdamState.init(params, **{k: meta["adam"][k] for k in ("beta1", "beta2", "epsilon")})
    adam.step_count = meta["adam"]["step_count"]
    for name in params:
        adam.first_moment[name].copy_(torch.from_numpy(arrays[f"adam_m/{name}"]))
        adam.second_moment[name].copy_(torch.from_numpy(arrays[f"adam_v/{name}"]))
    gen = torch.Generator()
    gen.set_state(torch.from_numpy(arrays["rng/dropout"].copy()))
    return cfg, core, adam, gen, meta["step"], arrays["losses"].tolist()


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted(Path(out_dir).glob("ckpt-*.ckpt"))
    return found[-1] if found else None


def _write_metrics(path: Path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())


def read_metrics(path: Path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METRICS_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: metrics CSV lacks column {missing[0]!r}")
        out = []
        for row in reader:
            out.append(
                MetricsRecord(
                    int(row["step"]), row["split"], float(row["loss"]), float(row["ppl"]), float(row["bpc"]),
                    float(row["error_rate"]), float(row["batch_time_ms"]), int(row["qk_pairs"]), int(row["ff_tokens"]),
                )
            )
    return out


def train(
    cfg: RunConfig,
    stream=None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    log: Callable[[str], None] | None = None,
    stop_after: int | None = None,
    final_test: bool = True,
) -> TrainResult:
    """Run the full protocol: batch, forward, masked loss, clip, Adam, periodic eval.

    With ``out_dir`` a checkpoint and the metrics CSV are written at every
    evaluation. ``stop_after`` halts early (used to simulate interruption).
    """
    cfg.validate()
    tc, vc = cfg.train, cfg.variant
    stream = stream or make_stream(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.yaml").write_text(cfg.dump())

    start = 0
    records: list[MetricsRecord] = []
    losses: list[float] = []
    ckpt = latest_checkpoint(out) if (resume and out is not None) else None
    if ckpt is not None:
        saved_cfg, core, adam, gen, start, losses = load_checkpoint(ckpt)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise ConfigError(f"{ckpt}: checkpoint was produced by a different configuration")
        if (out / "metrics.csv").exists():
            records = [r for r in read_metrics(out / "metrics.csv") if r.step <= start]
    else:
        core = TransCore(cfg.model.core(stream.vocab_size), seed=tc.seed)
        adam = AdamState.init(core.named_trainables())
        gen = rng.torch_generator(tc.seed, "dropout")
    if core.cfg.vocab_size != stream.vocab_size:
        raise ConfigError(
            f"task vocabulary ({stream.vocab_size}) does not match model vocabulary ({core.cfg.vocab_size})"
        )

    params = core.named_trainables()
    names = list(params)
    valid_x, valid_y = stream.eval_data("valid")
    seq_len = None
    last_good = ckpt
    interval_loss, interval_err, interval_time = [], [], []

    for step in range(start + 1, tc.total_steps + 1):
        if stop_after is not None and step > stop_after:
            break
        x, y = stream.train_batch(step, tc.batch_size)
        seq_len = x.shape[1]
        t0 = time.perf_counter()
        core.train()
        fc = ForwardContext(training=True, dropout=tc.dropout, embed_dropout=tc.embed_dropout, generator=gen)
        logits = run_variant(x, vc, core, fc).logits
        loss = cross_entropy(logits, y)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        grads, _ = clip_global_norm(list(grads), tc.clip_norm)
        adam_step(params, dict(zip(names, grads)), adam, lr_schedule(step, tc), tc.weight_decay)
        interval_time.append((time.perf_counter() - t0) * 1000.0)
        losses.append(float(loss.detach()))
        with torch.no_grad():
            live = y != IGNORE_INDEX
            interval_err.append(float((logits.argmax(-1) != y)[live].float().mean()))
        interval_loss.append(losses[-1])

        if step % tc.eval_every == 0 or step == tc.total_steps:
            cost = cost_model(vc, seq_len, len(core.order))
            kw = dict(
                batch_time_ms=statistics.fmean(interval_time),
                qk_pairs=cost.query_key_pairs * tc.batch_size,
                ff_tokens=cost.ff_tokens * tc.batch_size,
            )
            records.append(
                MetricsRecord.from_nll(step, "train", statistics.fmean(interval_loss), statistics.fmean(interval_err), **kw)
            )
            core.eval()
            v = evaluate(core, vc, valid_x, valid_y, step=step, split="valid")
            v.batch_time_ms, v.qk_pairs, v.ff_tokens = kw["batch_time_ms"], kw["qk_pairs"], kw["ff_tokens"]
            records.append(v)
            interval_loss, interval_err, interval_time = [], [], []
            if log:
                log(
                    f"step {step:>6d}  train_loss {records[-2].loss:.4f}  valid_nll {v.loss:.4f}  "
                    f"valid_err {100 * v.error_rate:.2f}%  {kw['batch_time_ms']:.1f} ms/batch"
                )
            if out is not None:
                last_good = save_checkpoint(
                    out / f"ckpt-{step:07d}.ckpt", cfg, core, adam, gen, step, losses, getattr(stream, "vocab_hash", "")
                )
                _write_metrics(out / "metrics.csv", records)

    finished = stop_after is None or stop_after >= tc.total_steps
    if final_test and finished:
        core.eval()
        tx, ty = stream.eval_data("test")
        records.append(evaluate(core, vc, tx, ty, step=tc.total_steps, split="test"))
        if out is not None:
            _write_metrics(out / "metrics.csv", records)
    core.eval()
    return TrainResult(records, losses, core, adam, out)


# -- timing --------------------------------------------------------------------


def benchmark_step_time(
    core_cfg: CoreConfig,
    vcfg: VariantConfig,
    tcfg: TrainConfig,
    n_trials: int = 5,
    seq_len: int = 128,
    warmup: int = 2,
) -> tuple[float, float]:
    """Mean and stddev wall-clock (ms) of one forward+backward+update on a fixed batch."""
    core = TransCore(core_cfg, seed=tcfg.seed)
    params = core.named_trainables()
    names = list(params)
    adam = AdamState.init(params)
    gen = rng.substream(tcfg.seed, "benchmark")
    x = torch.from_numpy(gen.integers(0, core_cfg.vocab_size, size=(tcfg.batch_size, seq_len)))
    times = []
    for i in range(warmup + n_trials):
        t0 = time.perf_counter()
        logits = run_variant(x, vcfg, core, ForwardContext(training=True), strict=False).logits
        loss = cross_entropy(logits, x)
        grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        grads, _ = clip_global_norm(list(grads), tcfg.clip_norm)
        adam_step(params, dict(zip(names, grads)), adam, tcfg.lr_peak)
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.fmean(times), (statistics.stdev(times) if len(times) > 1 else 0.0)


# -- seed sweeps ---------------------------------------------------------------


@dataclass
class SweepResult:
    seeds: list[int]
    valid: list[float]
    test: list[float]
    metric: str

    @property
    def mean(self) -> float:
        return statistics.fmean(self.test)

    @property
    def std(self) -> float:
        return statistics.stdev(self.test) if len(self.test) > 1 else 0.0

    @property
    def valid_mean(self) -> float:
        return statistics.fmean(self.valid)

    @property
    def valid_std(self) -> float:
        return statistics.stdev(self.valid) if len(self.valid) > 1 else 0.0

    @property
    def best_index(self) -> int:
        return min(range(len(self.seeds)), key=lambda i: (self.valid[i], i))

    @property
    def best_seed(self) -> int:
        return self.seeds[self.best_index]

    @property
    def best_test(self) -> float:
        return self.test[self.best_index]

    def row(self, scale: float = 100.0, digits: int = 1) -> str:
        """Table-style 'valid | test' cells, e.g. ``0.2 ± 0.1 | 0.2 ± 0.1``."""
        fmt = lambda m, s: f"{m * scale:.{digits}f} ± {s * scale:.{digits}f}"
        return f"{fmt(self.valid_mean, self.valid_std)} | {fmt(self.mean, self.std)}"


def seed_sweep(
    cfg: RunConfig,
    seeds: Sequence[int],
    metric: str = "error_rate",
    runner: Callable[[RunConfig], TrainResult] | None = None,
    out_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> SweepResult:
    """Train once per seed; report mean ± std and the best-by-validation seed's test metric."""
    if len(seeds) < 2:
        raise ConfigError("seed_sweep needs at least two seeds")
    runner = runner or (lambda c: train(c, out_dir=None if out_dir is None else Path(out_dir) / f"seed{c.train.seed}", log=log))
    valid, test = [], []
    for s in seeds:
        result = runner(cfg.replace(train={"seed": s}))
        valid.append(getattr(result.last("valid"), metric))
        test.append(getattr(result.last("test"), metric))
    return SweepResult(list(seeds), valid, test, metric)
