import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stairlab.errors import ConfigError, SchedulerError
from stairlab.instrument import Counters
from stairlab.schedule import (
    ChunkState,
    StaircaseWindow,
    VariantConfig,
    build_chunks,
    instrumented,
    run_variant,
)
from stairlab.transcore import CoreConfig, ForwardContext, HiddenBlock, TransCore

V = 9


def make_core(seed=0, dtype=torch.float64):
    cfg = CoreConfig(vocab_size=V, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_rel_pos=12)
    return TransCore(cfg, seed=seed, dtype=dtype)


def replay_staircase(core, tokens, cfg):
    """Reference: explicit (chunk, pass) state table, one core call per step."""
    h = core.f_in(tokens)
    T = h.shape[1]
    C = cfg.C
    K = -(-T // C)
    P = cfg.passes
    spans = [(j * C, min(j * C + C, T)) for j in range(K)]
    state = {(j, 0): h[:, a:b] for j, (a, b) in enumerate(spans)}
    for s in range(K + P - 1):
        active = [j for j in range(K) if 0 <= s - j < P]
        newest = min(s, K - 1)
        frozen = []
        if cfg.freezes:
            lo = 0 if cfg.variant == "global_cached_staircase" else newest - cfg.N + 1
            frozen = [j for j in range(K) if s - j >= P and j >= lo]
        x = torch.cat([state[(j, s - j)] for j in active], 1)
        pos = torch.cat([torch.arange(*spans[j]) for j in active])
        prefix = prefix_pos = None
        if frozen:
            prefix = torch.cat([state[(j, P)] for j in frozen], 1)
            prefix_pos = torch.cat([torch.arange(*spans[j]) for j in frozen])
        out = core.trans_core(x, pos, prefix, prefix_pos)
        start = 0
        for j in active:
            n = spans[j][1] - spans[j][0]
            state[(j, s - j + 1)] = out[:, start:start + n]
            start += n
    return core.f_out(torch.cat([state[(j, P)] for j in range(K)], 1))


def tokens_for(seed, T, B=2):
    return torch.randint(0, V, (B, T), generator=torch.Generator().manual_seed(seed))


STAIR_CASES = [
    VariantConfig("staircase", N=1, C=3),
    VariantConfig("staircase", N=2, C=3),
    VariantConfig("staircase", N=3, C=2),
    VariantConfig("cached_staircase", N=3, C=2, M=1),
    VariantConfig("cached_staircase", N=3, C=2, M=2),
    VariantConfig("global_cached_staircase", N=2, C=2, M=1),
    VariantConfig("global_cached_staircase", N=3, C=3, M=2),
]


@pytest.mark.parametrize("cfg", STAIR_CASES, ids=lambda c: f"{c.variant}-N{c.N}-C{c.C}-M{c.M}")
@pytest.mark.parametrize("T", [1, 5, 11])
def test_staircase_matches_replay(cfg, T):
    core = make_core(seed=T)
    toks = tokens_for(T, T)
    got = run_variant(toks, cfg, core).logits
    want = replay_staircase(core, toks, cfg)
    assert torch.allclose(got, want, atol=1e-12)


def test_single_chunk_staircase_is_repeated_core():
    core = make_core(1)
    toks = tokens_for(1, 4)
    cfg = VariantConfig("staircase", N=3, C=8)
    h = core.f_in(toks)
    pos = torch.arange(4)
    for _ in range(3):
        h = core.trans_core(h, pos)
    assert torch.allclose(run_variant(toks, cfg, core).logits, core.f_out(h), atol=1e-12)


def test_n1_staircase_is_chunked_transformer_when_c_covers_sequence():
    core = make_core(2)
    toks = tokens_for(2, 7)
    got = run_variant(toks, VariantConfig("staircase", N=1, C=7), core).logits
    assert torch.allclose(got, core(toks), atol=1e-12)


def test_baseline_xl_single_segment_is_plain_transformer():
    core = make_core(3)
    toks = tokens_for(3, 10)
    got = run_variant(toks, VariantConfig("baseline_xl", N=1, S=64, segment_len=64), core).logits
    assert torch.allclose(got, core(toks), atol=1e-12)


@pytest.mark.parametrize("seg", [1, 3, 4, 16])
@pytest.mark.parametrize("S", [1, 2, 5])
def test_ladder_segments_do_not_change_values(seg, S):
    core = make_core(4)
    toks = tokens_for(4, 13)
    ref = run_variant(toks, VariantConfig("ladder", N=3, S=S, segment_len=64), core).logits
    got = run_variant(toks, VariantConfig("ladder", N=3, S=S, segment_len=seg), core).logits
    assert torch.allclose(got, ref, atol=1e-12)


@pytest.mark.parametrize("seg", [2, 5])
def test_staircase_segment_len_only_cuts_gradients(seg):
    core = make_core(5)
    toks = tokens_for(5, 12)
    a = run_variant(toks, VariantConfig("staircase", N=2, C=2, segment_len=64), core).logits
    b = run_variant(toks, VariantConfig("staircase", N=2, C=2, segment_len=seg), core).logits
    assert torch.allclose(a, b, atol=1e-12)


def test_truncation_blocks_gradient_across_segments():
    core = make_core(6)
    h = core.f_in(tokens_for(6, 8)).detach().requires_grad_(True)
    from stairlab.schedule import _run_stair

    out = _run_stair(core, h, VariantConfig("staircase", N=2, C=2, segment_len=4), ForwardContext())
    out[:, 7].sum().backward()
    assert float(h.grad[:, :4].abs().sum()) == 0.0
    assert float(h.grad[:, 4:].abs().sum()) > 0.0


def test_frozen_chunks_receive_no_gradient():
    core = make_core(7)
    from stairlab.schedule import _run_stair

    h = core.f_in(tokens_for(7, 6)).detach().requires_grad_(True)
    out = _run_stair(core, h, VariantConfig("cached_staircase", N=3, C=2, M=1), ForwardContext())
    out[:, 5].sum().backward()
    # the last chunk only sees earlier chunks through the detached cache
    assert float(h.grad[:, :4].abs().sum()) == 0.0


class TestValidation:
    def test_cached_requires_m_below_n(self):
        with pytest.raises(ConfigError, match=r"requires M < N \(got M=2, N=2\)"):
            VariantConfig("cached_staircase", N=2, M=2).validate()
        VariantConfig("cached_staircase", N=2, M=2).validate(strict=False)

    def test_m_zero_rejected(self):
        with pytest.raises(ConfigError, match="1 <= M <= N"):
            VariantConfig("cached_staircase", N=2, M=0).validate()

    def test_all_problems_named(self):
        with pytest.raises(ConfigError) as err:
            VariantConfig("staircase", N=0, C=0).validate()
        assert "N must be" in str(err.value) and "C must be" in str(err.value)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="unknown variant"):
            VariantConfig("feedback").validate()

    def test_baseline_needs_n1(self):
        with pytest.raises(ConfigError, match="baseline_xl"):
            VariantConfig("baseline_xl", N=2).validate()


class TestWindow:
    def test_build_chunks_short_tail(self):
        chunks = build_chunks(torch.zeros(1, 7, 2), 3)
        assert [c.size for c in chunks] == [3, 3, 1]
        assert chunks[2].block.positions.tolist() == [6]

    def test_overflow_detected(self):
        block = HiddenBlock(torch.zeros(1, 5, 2), torch.arange(5))
        w = StaircaseWindow(active=[ChunkState(0, 1, block)])
        with pytest.raises(SchedulerError, match="overflow"):
            w.check(VariantConfig(N=2, C=2))

    def test_pass_order_detected(self):
        b = HiddenBlock(torch.zeros(1, 1, 2), torch.arange(1))
        w = StaircaseWindow(active=[ChunkState(0, 0, b), ChunkState(1, 1, b)])
        with pytest.raises(SchedulerError, match="strictly decreasing"):
            w.check(VariantConfig(N=2, C=1))

    def test_positions_must_increase(self):
        with pytest.raises(ValueError):
            HiddenBlock(torch.zeros(1, 2, 2), torch.tensor([3, 3]))


@given(
    variant=st.sampled_from(["staircase", "cached_staircase", "global_cached_staircase", "ladder"]),
    N=st.integers(1, 4),
    C=st.integers(1, 4),
    T=st.integers(1, 14),
    data=st.data(),
)
@settings(max_examples=40, deadline=None)
def test_every_token_gets_configured_passes(variant, N, C, T, data):
    M = data.draw(st.integers(1, N)) if variant != "staircase" else N
    cfg = VariantConfig(variant, N=N, C=C, M=M, S=3, segment_len=5)
    core = make_core(0, torch.float32)
    counters = instrumented(cfg, core, tokens_for(0, T, 1), strict=False)
    assert counters.pass_histogram() == {cfg.passes: T}


def test_frozen_states_stay_fixed_while_cached():
    core = make_core(8, torch.float32)
    counters = Counters()
    with torch.no_grad():
        run_variant(tokens_for(8, 20, 1), VariantConfig("global_cached_staircase", N=2, C=2, M=1), core,
                    ForwardContext(counters=counters))
    assert counters.frozen_hashes
    for hashes in counters.frozen_hashes.values():
        assert len(set(hashes)) == 1
