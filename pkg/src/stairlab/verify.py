"""Invariant suites: causality grid, equivalences, gradient checks, cost exactness.

Each suite returns a list of :class:`PropertyResult`; ``run_suites`` is what
``stairlab verify`` calls.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable

import torch

from .cost import cost_model, from_counters
from .numerics import cross_entropy, finite_diff_check, layer_norm, matmul, softmax_rows
from .schedule import VariantConfig, instrumented, run_variant
from .transcore import CoreConfig, TransCore


@dataclass
class PropertyResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.suite}: {self.name}" + (f"  ({self.detail})" if self.detail else "")


def _core(seed: int, dtype=torch.float64, vocab: int = 7, pattern: str = "") -> TransCore:
    cfg = CoreConfig(vocab_size=vocab, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_rel_pos=16,
                     layer_pattern=pattern)
    return TransCore(cfg, seed=seed, dtype=dtype)


def _label(cfg: VariantConfig) -> str:
    if cfg.variant in ("ladder", "baseline_xl"):
        return f"{cfg.variant} N={cfg.N} S={cfg.S}"
    return f"{cfg.variant} N={cfg.N} C={cfg.C} M={cfg.M}"


# -- causality -----------------------------------------------------------------


def causality_grid() -> list[VariantConfig]:
    """Every variant over N in {1,2,4}, C in {1,2,8}, M in {1,N}, S in {4,16}."""
    out = []
    for N, C in itertools.product((1, 2, 4), (1, 2, 8)):
        out.append(VariantConfig("staircase", N=N, C=C))
        for M in sorted({1, N}):
            out.append(VariantConfig("cached_staircase", N=N, C=C, M=M))
            out.append(VariantConfig("global_cached_staircase", N=N, C=C, M=M))
    for N, S in itertools.product((1, 2, 4), (4, 16)):
        out.append(VariantConfig("ladder", N=N, S=S, segment_len=8))
    for S in (4, 16):
        out.append(VariantConfig("baseline_xl", N=1, S=S, segment_len=8))
    return out


def causality_check(cfg: VariantConfig, trials: int = 100, T: int = 20, seed: int = 0) -> PropertyResult:
    """Perturb the suffix from a random ``t'`` on; logits before ``t'`` must not move.

    All trials run as one batch. A failure names the first witness ``(t, t')``.
    """
    gen = torch.Generator().manual_seed(seed)
    core = _core(seed)
    V = core.cfg.vocab_size
    base = torch.randint(0, V, (trials, T), generator=gen)
    cut = torch.randint(1, T, (trials,), generator=gen)
    bumped = (base + torch.randint(1, V, (trials, T), generator=gen)) % V
    later = torch.arange(T)[None, :] >= cut[:, None]
    perturbed = torch.where(later, bumped, base)
    with torch.no_grad():
        a = run_variant(base, cfg, core, strict=False).logits
        b = run_variant(perturbed, cfg, core, strict=False).logits
    moved = (a - b).abs().amax(-1) > 0.0  # [trials, T]
    moved &= ~later
    label = _label(cfg)
    if bool(moved.any()):
        trial, t = (int(i) for i in moved.nonzero()[0])
        t_prime = int(cut[trial])
        return PropertyResult("causality", label, False, f"variant={cfg.variant} t={t} t'={t_prime}")
    return PropertyResult("causality", label, True, f"{trials} trials")


def suite_causality(trials: int = 100) -> list[PropertyResult]:
    return [causality_check(cfg, trials, seed=i) for i, cfg in enumerate(causality_grid())]


# -- equivalences --------------------------------------------------------------


def _max_delta(cfg_a: VariantConfig, cfg_b: VariantConfig, draws: int, T: Callable[[int], int],
               dtype=torch.float32) -> float:
    worst = 0.0
    for d in range(draws):
        core = _core(1000 + d, dtype)
        gen = torch.Generator().manual_seed(d)
        toks = torch.randint(0, core.cfg.vocab_size, (2, T(d)), generator=gen)
        with torch.no_grad():
            a = run_variant(toks, cfg_a, core, strict=False).logits
            b = run_variant(toks, cfg_b, core, strict=False).logits
        worst = max(worst, float((a - b).abs().max()))
    return worst


def suite_equivalence(draws: int = 20) -> list[PropertyResult]:
    out = []
    for S, seg in ((4, 8), (16, 5), (64, 64)):
        delta = _max_delta(VariantConfig("ladder", N=1, S=S, segment_len=seg),
                           VariantConfig("baseline_xl", N=1, S=S, segment_len=seg), draws, lambda d: 5 + d)
        out.append(PropertyResult("equivalence", f"ladder(N=1) == baseline_xl S={S}", delta == 0.0,
                                  f"max logit delta {delta:.3g}"))
    for N, C in ((1, 3), (2, 2), (3, 4)):
        delta = _max_delta(VariantConfig("cached_staircase", N=N, C=C, M=N),
                           VariantConfig("staircase", N=N, C=C), draws, lambda d: 3 + d)
        out.append(PropertyResult("equivalence", f"cached(M=N) == staircase N={N} C={C}", delta <= 1e-5,
                                  f"max logit delta {delta:.3g}"))
    for N, C, M in ((2, 3, 1), (3, 2, 1), (3, 2, 2), (4, 2, 3)):
        delta = _max_delta(VariantConfig("global_cached_staircase", N=N, C=C, M=M),
                           VariantConfig("cached_staircase", N=N, C=C, M=M), draws,
                           lambda d, n=N * C: 1 + d % n)
        out.append(PropertyResult("equivalence", f"global == cached for T<=NC, N={N} C={C} M={M}",
                                  delta <= 1e-5, f"max logit delta {delta:.3g}"))
    return out


# -- gradients -----------------------------------------------------------------

GRAD_TOL = 1e-4


def _primitive_checks(gen: torch.Generator) -> Iterable[tuple[str, float]]:
    def rnd(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    causal = torch.ones(4, 4, dtype=torch.bool).tril()
    yield "matmul", finite_diff_check(lambda p: matmul(p[0], p[1]).sin().sum(), [rnd(3, 4), rnd(4, 2)], 1e-6)
    yield "softmax_rows", finite_diff_check(
        lambda p: (softmax_rows(p[0], causal) * torch.arange(4.0, dtype=torch.float64)).sum(), [rnd(4, 4)], 1e-6
    )
    weights = torch.arange(5.0, dtype=torch.float64)
    yield "layer_norm", finite_diff_check(
        lambda p: (layer_norm(p[0], p[1], p[2]) * weights).sum().sin(), [rnd(3, 5), rnd(5), rnd(5)], 1e-6
    )
    targets = torch.tensor([0, 2, 1])
    yield "cross_entropy", finite_diff_check(lambda p: cross_entropy(p[0], targets), [rnd(3, 4)], 1e-6)


class _VariantModule(torch.nn.Module):
    def __init__(self, core: TransCore, cfg: VariantConfig | None):
        super().__init__()
        self.core, self.cfg = core, cfg

    def forward(self, toks: torch.Tensor) -> torch.Tensor:
        if self.cfg is None:
            return self.core(toks)
        return run_variant(toks, self.cfg, self.core).logits


def _model_check(cfg: VariantConfig | None, T: int, seed: int = 0) -> float:
    core = _core(seed, vocab=5)
    module = _VariantModule(core, cfg)
    names = [n for n, _ in module.named_parameters()]
    toks = torch.randint(0, 5, (2, T), generator=torch.Generator().manual_seed(seed))
    targets = torch.randint(0, 5, (2, T), generator=torch.Generator().manual_seed(seed + 1))

    def loss(ps):
        logits = torch.func.functional_call(module, dict(zip(names, ps)), (toks,))
        return cross_entropy(logits, targets)

    return finite_diff_check(loss, [p.detach().clone() for p in module.parameters()], 1e-6, 24)


def suite_gradients() -> list[PropertyResult]:
    gen = torch.Generator().manual_seed(0)
    out = []
    for name, err in _primitive_checks(gen):
        out.append(PropertyResult("gradients", f"primitive {name}", err <= GRAD_TOL, f"max rel err {err:.2e}"))
    err = _model_check(None, 6)
    out.append(PropertyResult("gradients", "2-layer core", err <= GRAD_TOL, f"max rel err {err:.2e}"))
    err = _model_check(VariantConfig("staircase", N=2, C=2), 8)
    out.append(PropertyResult("gradients", "staircase N=2 C=2 T=8", err <= GRAD_TOL, f"max rel err {err:.2e}"))
    return out


# -- cost model ----------------------------------------------------------------


def cost_grid() -> list[VariantConfig]:
    """27 (N, C, M) points; ``M = N`` points run the degenerate cached variant."""
    out = []
    for N, C in itertools.product((2, 4, 8), (1, 4, 8)):
        for M in (1, N // 2, N):
            out.append(VariantConfig("cached_staircase", N=N, C=C, M=M))
    return out


def suite_cost(T: int = 70) -> list[PropertyResult]:
    out = []
    core = _core(0, torch.float32)
    toks = torch.zeros(1, T, dtype=torch.long)
    apps = len(core.order)
    for cfg in cost_grid():
        counted = from_counters(instrumented(cfg, core, toks, strict=False))
        model = cost_model(cfg, T, apps)
        ok = counted.as_table() == model.as_table() and counted.steps == model.steps
        detail = f"pairs {counted.query_key_pairs} vs {model.query_key_pairs}, ff {counted.ff_tokens} vs {model.ff_tokens}"
        out.append(PropertyResult("cost", _label(cfg), ok, detail))
    # halving C at fixed NC halves steady per-step queries (M=1)
    long = torch.zeros(1, 256, dtype=torch.long)
    for NC in (16, 32):
        queries = []
        for C in (8, 4):
            cfg = VariantConfig("cached_staircase", N=NC // C, C=C, M=1)
            steps = instrumented(cfg, core, long).steps
            queries.append(steps[len(steps) // 2].queries)
        ok = queries[0] == 2 * queries[1] == 2 * 4 * apps
        out.append(PropertyResult("cost", f"queries scale with MC at NC={NC}", ok, f"C=8: {queries[0]}, C=4: {queries[1]}"))
    return out


SUITES: dict[str, Callable[[], list[PropertyResult]]] = {
    "causality": suite_causality,
    "equivalence": suite_equivalence,
    "gradients": suite_gradients,
    "cost": suite_cost,
}


def run_suites(names: Iterable[str] | None = None, log: Callable[[str], None] | None = None) -> list[PropertyResult]:
    names = list(names) if names else list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    results = []
    for n in names:
        for r in SUITES[n]():
            results.append(r)
            if log:
                log(r.line())
    return results
