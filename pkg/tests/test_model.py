import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from milkstream import numerics as nx
from milkstream.attention import AttentionConfig
from milkstream.data import EOS, TaskSpec, Vocabulary, generate_corpus, make_batches, pad_batch
from milkstream.errors import ContractViolation, InvalidArgument, NumericFailure, VersionError
from milkstream.latency import delays_from_trace
from milkstream.model import (ModelConfig, StreamingModel, StreamingSource, WaitKSchedule,
                              batch_loss, greedy_simultaneous_decode, load_checkpoint,
                              save_checkpoint, sequence_accuracy, train_step, wait_k_decode)
from milkstream.training import TrainConfig, fit

SPEC = TaskSpec(min_len=3, max_len=6)


def small(kind="milk", seed=0, **att):
    return StreamingModel(ModelConfig(embed_dim=4, hidden_dim=6, attn_dim=4, init_seed=seed,
                                      attention=AttentionConfig(kind=kind, **att)))


def source(n, seed=0):
    rng = np.random.default_rng(seed)
    return [int(t) for t in rng.integers(6, 32, size=n - 1)] + [EOS]


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ModelConfig(hidden_dim=0)
    with pytest.raises(InvalidArgument):
        ModelConfig(bidirectional=True)
    cfg = ModelConfig(attention=AttentionConfig(kind="mocha", chunk_size=4))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_encode_prefix_is_incremental():
    m = small()
    toks = source(9)
    full = m.encoder(torch.tensor([toks]))[0].detach()
    for j in range(len(toks) + 1):
        assert torch.equal(m.encode_prefix(toks, j), full[:j])
    with pytest.raises(InvalidArgument):
        m.encode_prefix(toks, len(toks) + 1)
    with pytest.raises(InvalidArgument):
        m.encode_prefix([99], 1)


def test_streaming_source_refuses_unread_positions():
    src = StreamingSource(small(), source(5))
    src.state_at(1)
    src.state_at(2)
    with pytest.raises(ContractViolation):
        src.state_at(4)
    src.read_upto(5)
    with pytest.raises(ContractViolation):
        src.read()


@pytest.mark.parametrize("kind", ["soft", "monotonic", "mocha", "milk", "wait_k"])
def test_full_loss_gradient(kind):
    n, worst, _, _ = gradcheck.full_loss_gradient_error(kind)
    assert n <= 200
    assert worst < 1e-4


def test_train_step_is_deterministic():
    def run():
        m = small(noise_n=1.0)
        rng = nx.SeededRng(4)
        opt = torch.optim.Adam(m.parameters(), lr=1e-2)
        for b in make_batches(generate_corpus(SPEC, 40), 4, seed=1):
            train_step(m, b, 0.2, rng)
            opt.step()
        return torch.cat([p.detach().ravel() for p in m.parameters()])
    assert run().numpy().tobytes() == run().numpy().tobytes()


def test_batch_loss_names_bad_sentence():
    m = small()
    with torch.no_grad():
        m.output.bias[0] = float("nan")
    with pytest.raises(NumericFailure, match="sentence 0"):
        batch_loss(m, pad_batch(generate_corpus(SPEC, 2)), 0.0)
    with pytest.raises(InvalidArgument):
        batch_loss(small(), pad_batch(generate_corpus(SPEC, 2)), -1.0)


def test_expected_delays_per_kind():
    batch = pad_batch(generate_corpus(SPEC, 5))
    src_lens = batch.src_lens.double().unsqueeze(1)
    _, d, beta = small("soft").forward_expectation(batch)
    assert torch.equal(d, src_lens.expand_as(d))
    _, d, _ = small("wait_k", wait_k=2).forward_expectation(batch)
    want = torch.clamp(2 + torch.arange(d.shape[1], dtype=nx.DTYPE), max=src_lens)
    assert torch.equal(d, want)
    _, d, beta = small("milk").forward_expectation(batch, nx.SeededRng(0))
    assert (d >= 1 - 1e-12).all() and (d <= src_lens + 1e-9).all()
    assert torch.allclose(beta.sum(-1), torch.ones_like(d), atol=1e-9)


def test_full_read_pins_head_to_end():
    batch = pad_batch(generate_corpus(SPEC, 4))
    m = small("milk")
    lp, d, _ = m.forward_expectation(batch, full_read=True)
    soft = small("soft")
    soft.load_state_dict(m.state_dict(), strict=False)
    lp2, d2, _ = soft.forward_expectation(batch)
    assert torch.equal(d, d2) and torch.allclose(lp, lp2, atol=0, rtol=0)


def test_soft_decode_reads_everything_first():
    res = greedy_simultaneous_decode(small("soft"), source(7))
    reads = [a.kind for a in res.trace.actions]
    assert reads[:7] == ["r"] * 7 and set(reads[7:]) == {"w"}
    assert res.trace.initial_delay() == 7


@pytest.mark.parametrize("k, rate, n", [(3, 1.0, 4), (1, 1.1, 30), (2, 0.5, 10), (4, 2.0, 12)])
def test_wait_k_decode_follows_schedule(k, rate, n):
    sched = WaitKSchedule(k, rate)
    res = wait_k_decode(small("wait_k"), source(n), sched, max_len=n)
    g = delays_from_trace(res.trace).g
    want = [min(k + math.floor(Fraction(str(rate)) * i), n) for i in range(len(g))]
    assert list(g) == want


def test_wait_3_table_schedule():
    assert [WaitKSchedule(3).delay(i, 4) for i in range(1, 5)] == [3, 4, 4, 4]
    # rate 1.1: two reads before write 11, one before every other write
    d = [WaitKSchedule(1, 1.1).delay(i, 100) for i in range(1, 13)]
    assert np.diff(d).tolist() == [1] * 9 + [2, 1]
    with pytest.raises(InvalidArgument):
        WaitKSchedule(0)


def test_wait_k_sentinel_is_full_attention():
    soft = small("soft")
    wk = small("wait_k", wait_k=300)
    wk.load_state_dict(soft.state_dict())
    src = source(8)
    a, b = greedy_simultaneous_decode(soft, src), greedy_simultaneous_decode(wk, src)
    assert a.tokens == b.tokens and a.trace.actions == b.trace.actions


def test_hard_and_expected_delays_agree_at_saturation():
    src = source(6)
    batch = pad_batch([(src, [7, 8, 9, EOS])])
    for offset, want in ((-60.0, 6), (60.0, 1)):
        m = small("milk")
        with torch.no_grad():
            m.mono_energy.offset.fill_(offset)
        _, d, _ = m.forward_expectation(batch)
        assert torch.allclose(d, torch.full_like(d, float(want)), atol=1e-9)
        res = greedy_simultaneous_decode(m, src, max_len=4)
        assert res.heads == [want] * len(res.heads)


@pytest.mark.parametrize("kind", ["milk", "mocha", "monotonic"])
def test_hard_decode_attention_stays_behind_head(kind):
    res = greedy_simultaneous_decode(small(kind, chunk_size=2), source(9, seed=3))
    assert res.heads == sorted(res.heads)
    for row, h in zip(res.beta, res.heads):
        assert abs(row.sum() - 1) < 1e-9 and not row[h:].any()


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 10), st.integers(0, 10 ** 6), st.sampled_from(["milk", "wait_k", "mocha"]))
def test_decoding_is_causal(n, seed, kind):
    # writes made before reading token j cannot depend on tokens j and later
    m = small(kind, seed=1, wait_k=2)
    a = source(n, seed)
    b = list(a)
    b[-2] = 6 if a[-2] != 6 else 7
    ra = greedy_simultaneous_decode(m, a, max_len=n)
    rb = greedy_simultaneous_decode(m, b, max_len=n)
    before = 0
    for act in ra.trace.actions:
        if act.kind == "r" and act.pos == n - 1:
            break
        before += act.kind == "w"
    assert ra.tokens[:before] == rb.tokens[:before]


def test_checkpoint_round_trip(tmp_path):
    m = small("mocha", chunk_size=3)
    vocab = Vocabulary.synthetic(32)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(m, p1, vocab, {"step": 5})
    m2, v2, meta = load_checkpoint(p1)
    save_checkpoint(m2, p2, v2, meta)
    assert p1.read_bytes() == p2.read_bytes()
    assert v2 == vocab and meta == {"step": 5} and m2.cfg == m.cfg
    assert p1.read_bytes().startswith(b"MILKSTREAM-CKPT-1\n")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"MILKSTREAM-CKPT-0\n" + p1.read_bytes().split(b"\n", 1)[1])
    with pytest.raises(VersionError):
        load_checkpoint(bad)
    bad.write_bytes(p1.read_bytes() + b"\0" * 8)
    with pytest.raises(VersionError):
        load_checkpoint(bad)


def test_sequence_accuracy():
    assert sequence_accuracy([[1, 2], [3]], [[1, 2], [4]]) == (0.5, 2 / 3)
    assert sequence_accuracy([[1, 2, 9]], [[1, 2]]) == (0.0, 1.0)
    with pytest.raises(InvalidArgument):
        sequence_accuracy([], [])


def test_fit_keeps_best_and_is_reproducible(tmp_path):
    data = generate_corpus(TaskSpec(kind="copy", min_len=2, max_len=4), 64)
    cfg = TrainConfig(steps=12, batch_size=16, eval_every=4, full_read_steps=4,
                      latency_weight=0.1, latency_delay=6, latency_ramp=2)
    assert [cfg.weight_at(s) for s in (0, 5, 6, 7, 20)] == [0, 0, 0.05, 0.1, 0.1]
    paths = []
    for run in range(2):
        m = small("milk", noise_n=1.0)
        res = fit(m, data, data[:16], cfg)
        assert res.best_step >= 8 and len(res.history) == 3
        paths.append(tmp_path / f"{run}.ckpt")
        save_checkpoint(m, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
