"""Acceptance criteria, each at its stated tolerance.

Every test reports one PASS/FAIL line (collected in the terminal summary)
before asserting. Criteria 1, 2, 3 and 10 train real models on one CPU and
take most of the suite's wall-clock time.
"""

import itertools
import time

import pytest
import torch

from acceptance_log import report
from stairlab import config, verify
from stairlab.cli import build_corpus
from stairlab.harness import benchmark_step_time, read_metrics, seed_sweep, train
from stairlab.schedule import VariantConfig
from stairlab.transcore import TransCore, param_count

SEEDS = [1, 2, 3]


def _sweep(profile: str, tmp_path, **over):
    cfg = config.load(profile)
    if over:
        cfg = cfg.replace(**over)
    t0 = time.process_time()
    result = seed_sweep(cfg, SEEDS, "error_rate", out_dir=tmp_path / profile)
    return result, time.process_time() - t0


def _pct(x: float) -> str:
    return f"{100 * x:.2f}%"


def test_c01_state_tracking_separation(tmp_path):
    stair, t1 = _sweep("rw-staircase-n2", tmp_path)
    base, t2 = _sweep("rw-baseline-xl", tmp_path)
    minutes = (t1 + t2) / 60
    ok = stair.best_test <= 0.05 and base.best_test >= 0.50 and minutes <= 45
    detail = (
        f"staircase N=2 C=8 best-by-valid test error {_pct(stair.best_test)} (need <= 5%), "
        f"baseline_xl {_pct(base.best_test)} (need >= 50%), {minutes:.1f} CPU-min (need <= 45); "
        f"staircase valid|test {stair.row()}, baseline {base.row()}"
    )
    assert report("C1 state-tracking separation", ok, detail), detail


def test_c02_ladder_recurrence_trend(tmp_path):
    means = {}
    rows = {}
    for n in (2, 4, 8):
        res, _ = _sweep(f"rw-ladder-n{n}", tmp_path)
        means[n] = res.mean
        rows[n] = res.row()
    decreasing = means[2] > means[4] > means[8]
    ok = decreasing and means[8] <= 0.15
    detail = (
        f"mean test error N=2 {_pct(means[2])}, N=4 {_pct(means[4])}, N=8 {_pct(means[8])}; "
        f"strictly decreasing={decreasing}, N=8 needs <= 15%"
    )
    assert report("C2 ladder recurrence trend", ok, detail), detail


def test_c03_algorithm_ordering(tmp_path):
    stair, _ = _sweep("alg-staircase-n2", tmp_path)
    ladder, _ = _sweep("alg-ladder-n2", tmp_path)
    ok = stair.best_test <= 0.10 and ladder.best_test >= 3 * stair.best_test
    detail = (
        f"staircase N=2 best-seed error {_pct(stair.best_test)} (need <= 10%), "
        f"ladder N=2 {_pct(ladder.best_test)} (need >= 3x = {_pct(3 * stair.best_test)})"
    )
    assert report("C3 algorithm ordering", ok, detail), detail


def test_c04_exact_equivalences():
    results = verify.suite_equivalence(draws=20)
    ladder = [r for r in results if r.name.startswith("ladder")]
    ok = all(r.passed for r in results) and all(r.detail == "max logit delta 0" for r in ladder)
    detail = "; ".join(f"{r.name}: {r.detail}" for r in results)
    assert report("C4 exact equivalences", ok, detail), detail


def test_c05_causality_grid():
    grid = verify.causality_grid()
    covered = {(c.variant, c.N, c.C, c.M) for c in grid if c.variant not in ("ladder", "baseline_xl")}
    expected = {
        (v, N, C, M)
        for v in ("cached_staircase", "global_cached_staircase")
        for N, C in itertools.product((1, 2, 4), (1, 2, 8))
        for M in {1, N}
    }
    assert expected <= covered
    results = verify.suite_causality(trials=100)
    bad = [r for r in results if not r.passed]
    ok = not bad
    detail = f"{len(results)} configs x 100 trials, {len(bad)} violations" + (f"; first: {bad[0].line()}" if bad else "")
    assert report("C5 causality grid", ok, detail), detail


def test_c06_parameter_invariance():
    counts = {}
    for n in (1, 2, 4, 8):
        cfg = config.load("rw-staircase-n2").replace(variant={"N": n})
        core_cfg = cfg.model.core(68)
        core = TransCore(core_cfg)
        counts[n] = (param_count(core_cfg), sum(p.numel() for p in core.parameters()))
    ok = len(set(counts.values())) == 1 and all(a == b for a, b in counts.values())
    detail = ", ".join(f"N={n}: {a}" for n, (a, _) in counts.items())
    assert report("C6 parameter invariance", ok, detail), detail


def test_c07_cost_model_exactness():
    results = verify.suite_cost()
    grid = [r for r in results if not r.name.startswith("queries")]
    scaling = [r for r in results if r.name.startswith("queries")]
    ok = len(grid) == 27 and all(r.passed for r in results)
    detail = f"{sum(r.passed for r in grid)}/{len(grid)} grid points integer-equal; " + "; ".join(
        f"{r.name}: {r.detail}" for r in scaling
    )
    assert report("C7 cost-model exactness", ok, detail), detail


def test_c08_gradient_correctness():
    results = verify.suite_gradients()
    ok = all(r.passed for r in results)
    detail = "; ".join(f"{r.name} {r.detail}" for r in results)
    assert report("C8 gradient correctness", ok, detail), detail


def test_c09_determinism_and_persistence(tmp_path):
    cfg = config.load("rw-staircase-n2").replace(train={"total_steps": 40, "warmup_steps": 10, "eval_every": 10, "dropout": 0.1})
    a = train(cfg, out_dir=tmp_path / "a")
    b = train(cfg, out_dir=tmp_path / "b")
    same = a.losses == b.losses
    part = tmp_path / "part"
    train(cfg, out_dir=part, stop_after=20)
    resumed = train(cfg, out_dir=part, resume=True)
    trajectory = resumed.losses == a.losses
    weights = all(torch.equal(p, q) for p, q in zip(a.core.parameters(), resumed.core.parameters()))
    key = lambda rows: [(r.step, r.split, r.loss, r.error_rate) for r in rows]
    csv_same = key(read_metrics(part / "metrics.csv")) == key(read_metrics(tmp_path / "a" / "metrics.csv"))
    ok = same and trajectory and weights and csv_same
    detail = (
        f"same-seed loss curves identical={same}; resume at step 20 reproduces losses={trajectory}, "
        f"weights={weights}, metrics={csv_same}"
    )
    assert report("C9 determinism & persistence", ok, detail), detail


def test_c10_language_model_smoke(tmp_path):
    corpus = build_corpus(tmp_path / "corpus.txt", 1_000_000)
    t0 = time.process_time()
    bpc = {}
    for n in (1, 4):
        cfg = config.load(f"lm-ladder-n{n}").replace(task={"corpus_path": str(corpus)})
        result = train(cfg, out_dir=tmp_path / f"n{n}", final_test=False)
        bpc[n] = result.last("valid").bpc
    minutes = (time.process_time() - t0) / 60
    ok = bpc[4] <= bpc[1] - 0.05 and minutes <= 60
    detail = (
        f"valid bpc ladder N=1 {bpc[1]:.4f}, N=4 {bpc[4]:.4f} (need <= {bpc[1] - 0.05:.4f}), "
        f"{minutes:.1f} CPU-min (need <= 60)"
    )
    assert report("C10 LM smoke", ok, detail), detail


def test_c11_relative_speed_ordering():
    cfg = config.load("rw-staircase-n2")
    core_cfg = cfg.model.core(68)
    context = 32
    variants = {
        "feedback (C=1, M=1)": VariantConfig("cached_staircase", N=context, C=1, M=1),
        "staircase N=8": VariantConfig("staircase", N=8, C=context // 8),
        "staircase N=2": VariantConfig("staircase", N=2, C=context // 2),
        "baseline_xl": VariantConfig("baseline_xl", N=1, S=context, segment_len=128),
    }
    times = {k: benchmark_step_time(core_cfg, v, cfg.train, n_trials=5, seq_len=128)[0] for k, v in variants.items()}
    values = list(times.values())
    ok = all(a > b for a, b in zip(values, values[1:]))
    detail = " > ".join(f"{k} {t:.0f} ms" for k, t in times.items())
    assert report("C11 relative speed ordering", ok, detail), detail
