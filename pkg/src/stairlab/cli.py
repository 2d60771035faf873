"""``stairlab`` command line: gen-data, train, eval, verify, cost, bench, sweep, export-plots, make-corpus.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import statistics
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import torch
import yaml

from . import config as config_mod
from .errors import (
    CheckpointError,
    ConfigError,
    IngestionError,
    SpecError,
    StairlabError,
    VocabularyError,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
VALIDATION_ERRORS = (ConfigError, SpecError, VocabularyError, IngestionError, CheckpointError)
PLOT_COLUMNS = ["model", "recurrent_steps", "metric_mean", "metric_std"]


class CommandFailed(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def code_hash() -> str:
    """Git-style content hash over the package's own source files."""
    root = Path(__file__).parent
    h = hashlib.sha1()
    for path in sorted(root.rglob("*")):
        if path.suffix in (".py", ".yaml") and "__pycache__" not in path.parts:
            data = path.read_bytes()
            h.update(f"blob {path.relative_to(root).as_posix()} {len(data)}\0".encode())
            h.update(data)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: list[str]
    out_dir: str
    config_path: str = ""
    resolved_config: dict | None = None
    code_hash: str = field(default_factory=code_hash)
    started: str = field(default_factory=_now)
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, path: Path) -> Path:
        self.finished = _now()
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _print(msg: str) -> None:
    print(msg, flush=True)


def _load_config(ref: str) -> config_mod.RunConfig:
    return config_mod.load(ref)


# -- gen-data ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .tasks import gen_algorithm, gen_random_walk, write_episodes

    cfg = _load_config(args.config)
    task = cfg.task
    if task.kind == "char_corpus":
        raise ConfigError("gen-data handles random_walk and algorithm tasks only")
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    seed = cfg.train.seed if args.seed is None else args.seed
    if task.kind == "random_walk":
        episodes = gen_random_walk(task.random_walk_spec(), seed, args.count, split=args.split)
    else:
        episodes = gen_algorithm(task.algorithm_spec(), seed, args.count, split=args.split)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise CommandFailed(f"cannot write {out}: directory {out.parent} does not exist", EXIT_RUNTIME)
    try:
        write_episodes(out, episodes, task.kind)
    except OSError as exc:
        raise CommandFailed(f"cannot write {out}: {exc}", EXIT_RUNTIME) from exc
    RunManifest(sys.argv, str(out.parent), args.config, cfg.to_dict(),
                extra={"seed": seed, "count": args.count, "split": args.split}).write(
        out.with_name(out.name + ".manifest.json")
    )
    _print(f"wrote {len(episodes)} {task.kind} episodes to {out}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    from .harness import train

    cfg = _load_config(args.config)
    overrides = _parse_overrides(args.set)
    if overrides:
        cfg = cfg.replace(**overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(sys.argv, str(out), args.config, cfg.to_dict())
    result = train(cfg, out_dir=out, resume=args.resume, log=_print)
    test = result.last("test")
    if test is not None:
        _print(f"test  nll {test.loss:.4f}  ppl {test.ppl:.3f}  bpc {test.bpc:.4f}  error {100 * test.error_rate:.2f}%")
    manifest.write(out / "manifest.json")
    return EXIT_OK


def _parse_overrides(items: Sequence[str] | None) -> dict[str, dict]:
    """``section.key=value`` pairs; values are parsed as YAML scalars."""
    out: dict[str, dict] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out.setdefault(section, {})[name] = yaml.safe_load(value)
    return out


# -- eval ----------------------------------------------------------------------


def _eval_stream(cfg, data: str | None):
    """Evaluation inputs plus the vocabulary hash they imply."""
    from .harness import CorpusStream, make_stream
    from .numerics import IGNORE_INDEX
    from .tasks import load_char_corpus, pack_episodes, read_episodes

    if data is None:
        return make_stream(cfg), None
    path = Path(data)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    head = path.read_bytes()[:64]
    if head.startswith(b"# stairlab-episodes"):
        meta, episodes = read_episodes(path)
        if not episodes:
            raise IngestionError(f"{path}: no episodes")
        seqs = [pack_episodes([ep]) for ep in episodes]
        width = max(len(s) for s in seqs)
        x = torch.zeros(len(seqs), width, dtype=torch.long)
        y = torch.full((len(seqs), width), IGNORE_INDEX, dtype=torch.long)
        for i, s in enumerate(seqs):
            x[i, : len(s)] = torch.from_numpy(s.inputs)
            y[i, : len(s)] = torch.from_numpy(s.targets)
        return (x, y), meta.get("spec", "-")
    task = cfg.task
    corpus = load_char_corpus(path, task.split_fracs, task.max_bytes or None)
    return CorpusStream(corpus, task.seq_len, cfg.train.seed, eval_rows=task.eval_episodes), corpus.vocab_hash()


def cmd_eval(args) -> int:
    from .harness import MetricsRecord, _write_metrics, evaluate, load_checkpoint, read_metrics

    cfg, core, _, _, step, _ = load_checkpoint(args.checkpoint)
    from .checkpoint import load as load_raw

    _, meta = load_raw(args.checkpoint)
    stream, data_hash = _eval_stream(cfg, args.data)
    ckpt_hash = meta.get("vocab_hash", "")
    if data_hash is None:
        data_hash = getattr(stream, "vocab_hash", "")
    if ckpt_hash and data_hash and ckpt_hash != data_hash:
        raise VocabularyError(f"vocabulary mismatch: checkpoint {ckpt_hash} vs data {data_hash}")
    if isinstance(stream, tuple):
        x, y = stream
    else:
        x, y = stream.eval_data(args.split)
    if int(x.max()) >= core.cfg.vocab_size:
        raise VocabularyError(f"vocabulary mismatch: checkpoint {ckpt_hash} vs data {data_hash}")
    record = evaluate(core, cfg.variant, x, y, step=step, split=args.split)
    _print(
        f"{args.split}  step {step}  nll {record.loss:.4f}  ppl {record.ppl:.3f}  "
        f"bpc {record.bpc:.4f}  error {100 * record.error_rate:.2f}%"
    )
    if args.metrics:
        path = Path(args.metrics)
        rows: list[MetricsRecord] = read_metrics(path) if path.exists() else []
        _write_metrics(path, rows + [record])
    return EXIT_OK


# -- verify --------------------------------------------------------------------


def cmd_verify(args) -> int:
    from . import verify
    from .masks import inject_mask_fault

    suites = args.suite or list(verify.SUITES)
    unknown = [s for s in suites if s not in verify.SUITES]
    if unknown:
        raise ConfigError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(verify.SUITES)}")
    if args.inject_mask_fault:
        with inject_mask_fault():
            results = verify.run_suites(suites, log=_print)
    else:
        results = verify.run_suites(suites, log=_print)
    failed = [r for r in results if not r.passed]
    _print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_VERIFY if failed else EXIT_OK


# -- cost ----------------------------------------------------------------------


def _grid_values(spec: str | None, default: int) -> list[int]:
    if not spec:
        return [default]
    return [int(v) for v in spec.split(",")]


def cmd_cost(args) -> int:
    from dataclasses import replace

    from .cost import cost_model, from_counters
    from .schedule import instrumented
    from .transcore import TransCore

    cfg = _load_config(args.config)
    base = cfg.variant
    apps = len(cfg.model.core(2).layer_order())
    rows = []
    for N, C, M in itertools.product(_grid_values(args.N, base.N), _grid_values(args.C, base.C),
                                     _grid_values(args.M, base.M)):
        v = replace(base, N=N, C=C, M=M if base.variant != "staircase" else N)
        v.validate(strict=False)
        report = cost_model(v, args.T, apps)
        row = {
            "variant": v.variant, "N": N, "C": C, "M": v.M, "S": v.S, "T": args.T,
            "query_key_pairs": report.query_key_pairs, "ff_tokens": report.ff_tokens,
            "core_calls": report.core_calls,
            "passes_per_token": " ".join(f"{n}:{c}" for n, c in report.passes_histogram.items()),
        }
        if args.check:
            core = TransCore(cfg.model.core(8), seed=cfg.train.seed)
            counted = from_counters(instrumented(v, core, torch.zeros(1, args.T, dtype=torch.long), strict=False))
            row["instrumented_match"] = counted.as_table() == report.as_table()
        rows.append(row)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    widths = {k: max(len(k), *(len(str(r.get(k, ""))) for r in rows)) for k in keys}
    _print("  ".join(k.rjust(widths[k]) for k in keys))
    for r in rows:
        _print("  ".join(str(r.get(k, "")).rjust(widths[k]) for k in keys))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    if args.check and not all(r["instrumented_match"] for r in rows):
        return EXIT_VERIFY
    return EXIT_OK


# -- bench / sweep -------------------------------------------------------------


def cmd_bench(args) -> int:
    from dataclasses import replace

    from .harness import benchmark_step_time

    cfg = _load_config(args.config)
    vocab = args.vocab
    rows = []
    for spec in args.variants or [None]:
        v = cfg.variant
        if spec:
            v = replace(v, **{k: (val if k == "variant" else int(val)) for k, val in
                              (p.split("=") for p in spec.split(","))})
        mean, std = benchmark_step_time(cfg.model.core(vocab), v, cfg.train, args.trials, args.T)
        rows.append((v, mean, std))
        _print(f"{v.variant:<24s} N={v.N:<3d} C={v.C:<4d} M={v.M:<3d}  {mean:9.1f} ± {std:.1f} ms/batch")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import seed_sweep

    cfg = _load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(sys.argv, str(out), args.config, cfg.to_dict())
    result = seed_sweep(cfg, seeds, args.metric, out_dir=out, log=_print)
    scale = 100.0 if args.metric == "error_rate" else 1.0
    _print(f"valid | test ({args.metric}): {result.row(scale=scale, digits=args.digits)}")
    _print(f"best seed by valid: {result.best_seed}  test {result.best_test * scale:.{args.digits}f}")
    manifest.extra = {"seeds": seeds, "valid": result.valid, "test": result.test, "best_seed": result.best_seed}
    manifest.write(out / "manifest.json")
    return EXIT_OK


# -- export-plots --------------------------------------------------------------


def _final_metric(path: Path, metric: str) -> float:
    from .harness import read_metrics

    records = read_metrics(path)
    for split in ("test", "valid"):
        rows = [r for r in records if r.split == split]
        if rows:
            return getattr(rows[-1], metric)
    raise ConfigError(f"{path}: no test or valid rows")


def aggregate_runs(paths: Sequence[Path], metric: str) -> list[dict]:
    """One row per (model, recurrent_steps): mean and sample std of the final metric."""
    groups: dict[tuple[str, int], list[float]] = {}
    for path in paths:
        cfg_path = path.parent / "resolved_config.yaml"
        if not cfg_path.exists():
            raise ConfigError(f"{path}: missing resolved_config.yaml next to the metrics file")
        cfg = config_mod.load(cfg_path)
        groups.setdefault((cfg.variant.variant, cfg.variant.N), []).append(_final_metric(path, metric))
    rows = []
    for (model, n), values in sorted(groups.items()):
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        rows.append({"model": model, "recurrent_steps": n, "metric_mean": statistics.fmean(values), "metric_std": std})
    return rows


def cmd_export_plots(args) -> int:
    paths = [Path(p) for p in args.metrics]
    if not paths:
        raise ConfigError("export-plots needs at least one metrics CSV")
    for p in paths:
        if not p.exists():
            raise IngestionError(f"{p}: no such file")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = {"error_vs_recurrence.csv": "error_rate", "ppl_vs_recurrence.csv": "ppl"}
    if args.metric:
        tables = {f"{args.metric}_vs_recurrence.csv": args.metric}
    for name, metric in tables.items():
        rows = aggregate_runs(paths, metric)
        with open(out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=PLOT_COLUMNS)
            w.writeheader()
            w.writerows(rows)
        _print(f"wrote {out / name} ({len(rows)} rows)")
    return EXIT_OK


# -- make-corpus ---------------------------------------------------------------


def build_corpus(out: Path, n_bytes: int) -> Path:
    """Concatenate the interpreter's standard-library sources (sorted paths) up to ``n_bytes``."""
    import sysconfig

    root = Path(sysconfig.get_paths()["stdlib"])
    chunks, total = [], 0
    for path in sorted(root.rglob("*.py")):
        if "site-packages" in path.parts or "test" in path.parts or "tests" in path.parts:
            continue
        try:
            data = path.read_bytes()
        except OSError:
            continue
        chunks.append(data)
        total += len(data)
        if total >= n_bytes:
            break
    blob = b"".join(chunks)[:n_bytes]
    if len(blob) < n_bytes:
        raise IngestionError(f"standard library under {root} holds only {len(blob)} bytes")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    return out


def cmd_make_corpus(args) -> int:
    out = build_corpus(Path(args.out), args.bytes)
    _print(f"wrote {args.bytes} bytes to {out} (sha256 {hashlib.sha256(out.read_bytes()).hexdigest()[:16]})")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stairlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write task episodes to a file")
    g.add_argument("config", help="config file or profile name; its [task] section is the spec")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", default="train", choices=["train", "valid", "test"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="episode file or corpus; defaults to the checkpoint's task")
    e.add_argument("--split", default="test", choices=["train", "valid", "test"])
    e.add_argument("--metrics", help="append the record to this metrics CSV")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", action="append", help="causality, equivalence, gradients or cost (repeatable)")
    v.add_argument("--inject-mask-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("cost", help="analytic attention/feedforward work")
    c.add_argument("config")
    c.add_argument("--T", type=int, required=True, help="sequence length")
    c.add_argument("--N", help="comma-separated grid values")
    c.add_argument("--C")
    c.add_argument("--M")
    c.add_argument("--check", action="store_true", help="cross-check against an instrumented run")
    c.add_argument("--csv")
    c.set_defaults(func=cmd_cost)

    b = sub.add_parser("bench", help="time training steps")
    b.add_argument("config")
    b.add_argument("--variants", nargs="*", help="e.g. variant=staircase,N=8,C=16")
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--T", type=int, default=128)
    b.add_argument("--vocab", type=int, default=256)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="train several seeds and report mean ± std")
    s.add_argument("config")
    s.add_argument("--seeds", required=True, help="comma-separated, at least two")
    s.add_argument("--out", required=True)
    s.add_argument("--metric", default="error_rate", choices=["error_rate", "loss", "ppl", "bpc"])
    s.add_argument("--digits", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export-plots", help="aggregate metrics CSVs into plot-ready tables")
    x.add_argument("metrics", nargs="*")
    x.add_argument("--out", required=True)
    x.add_argument("--metric", help="one metric column instead of the default error and ppl tables")
    x.set_defaults(func=cmd_export_plots)

    m = sub.add_parser("make-corpus", help="build a character corpus from standard-library sources")
    m.add_argument("--out", required=True)
    m.add_argument("--bytes", type=int, default=1_000_000)
    m.set_defaults(func=cmd_make_corpus)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (StairlabError, OSError, RuntimeError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
