import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import finite_difference_check
from revertlab.corpus import make_splits, synth_corpus
from revertlab.tinylm import (
    ModelConfig,
    RepresentationTrace,
    TapError,
    TapPoint,
    TinyLM,
    batch_taps,
    count_params,
    evaluate_ce,
    forward_with_tap,
    pad_batch,
    split,
    train_victim,
    victim_loss,
)


def _model(arch="decoder_only", **kw):
    cfg = dict(n_blocks=3, d_model=16, n_heads=2, d_ff=32, vocab_size=40, max_seq_len=12, seed=3)
    cfg.update(kw)
    return TinyLM(ModelConfig(arch=arch, **cfg)).eval()


def _tokens(seed=0, B=3, S=9, V=40):
    return torch.randint(0, V, (B, S), generator=torch.Generator().manual_seed(seed))


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_blocks=1)
    with pytest.raises(ValueError):
        ModelConfig(arch="rnn")


def test_tap_invariants():
    with pytest.raises(TapError):
        TapPoint(1, "embedding")
    with pytest.raises(TapError):
        TapPoint(0, "mlp_out")
    with pytest.raises(TapError):
        TapPoint.parse("x:block_out")
    assert TapPoint.parse("2:attention_out") == TapPoint(2, "attention_out")
    with pytest.raises(TapError):
        _model().config.check_tap(TapPoint(3, "block_out"))


def test_trace_rejects_non_finite():
    with pytest.raises(ValueError):
        RepresentationTrace(TapPoint(0, "block_out"), np.array([[np.inf, 0.0]]))
    with pytest.raises(ValueError):
        RepresentationTrace(TapPoint(0, "block_out"), np.zeros(4))


@pytest.mark.parametrize("arch", ["decoder_only", "encoder_decoder", "encoder_mlp"])
def test_taps_are_pure_observers(arch):
    m = _model(arch)
    x = _tokens()
    dec = x[:, :-1] if arch == "encoder_decoder" else None
    record = {}
    with torch.no_grad():
        plain = m(x, dec_tokens=dec)
        tapped = m(x, dec_tokens=dec, record=record)
    assert torch.equal(plain, tapped)
    assert set(record) == set(m.config.taps())
    for t, h in record.items():
        assert h.shape == (3, 9, 16)
        assert torch.isfinite(h).all()


def test_embedding_tap_is_token_plus_position():
    m = _model()
    tokens = [0, 5, 7, 1]
    trace, _ = forward_with_tap(m, tokens, TapPoint(0, "embedding"))
    expected = m.tok_emb.weight[tokens] + m.pos_emb.weight[:4]
    assert np.array_equal(trace.states, expected.detach().numpy())


def test_block_out_feeds_next_block():
    m = _model()
    x = _tokens(1)
    rec = {}
    with torch.no_grad():
        m(x, record=rec)
        seen = {}
        # block 2 starts with its pre-attention norm, so its input is the residual stream
        handle = m.blocks[2].ln1.register_forward_pre_hook(lambda mod, args: seen.setdefault("in", args[0].clone()))
        m(x)
        handle.remove()
    assert torch.equal(rec[TapPoint(1, "block_out")], seen["in"])


def test_attention_out_is_post_residual():
    m = _model()
    x = _tokens(2)
    rec = {}
    with torch.no_grad():
        m(x, record=rec)
    h0 = rec[TapPoint(0, "block_out")]
    a1 = rec[TapPoint(1, "attention_out")]
    f1 = rec[TapPoint(1, "ffn_out")]
    b1 = rec[TapPoint(1, "block_out")]
    assert torch.allclose(b1, a1 + f1, atol=1e-6)
    assert not torch.allclose(a1, h0)


@pytest.mark.parametrize("arch", ["decoder_only", "encoder_decoder", "encoder_mlp"])
def test_split_identity_at_every_valid_tap(arch):
    m = _model(arch)
    x = _tokens(3)
    tok, kp = pad_batch([list(r[: 5 + i]) for i, r in enumerate(x.tolist())], pad_id=1)
    dec = tok[:, :-1] if arch == "encoder_decoder" else None
    with torch.no_grad():
        full = m(tok, kp, dec_tokens=dec)
        for tap in m.config.taps(("attention_out", "block_out")):
            if tap.block_index == m.config.n_blocks - 1 and tap.position == "block_out":
                continue
            client, server = split(m, tap)
            out = server(client(tok, kp), kp, dec)
            assert (out - full).abs().max().item() <= 1e-5, tap
            assert count_params(client) + count_params(server) == count_params(m)


def test_split_rejects_embedding_and_ffn_taps():
    m = _model()
    with pytest.raises(TapError, match="cannot split before block 0 output"):
        split(m, TapPoint(0, "embedding"))
    with pytest.raises(TapError):
        split(m, TapPoint(0, "ffn_out"))


def test_attention_split_server_starts_with_ffn_of_same_block():
    m = _model()
    _, server = split(m, TapPoint(1, "attention_out"))
    assert server.ffn is m.blocks[1].ffn
    assert server.ln2 is m.blocks[1].ln2
    assert list(server.blocks) == [m.blocks[2]]


def test_batch_taps_matches_single_forward():
    m = _model()
    seqs = [[0, 4, 5, 1], [0, 9, 1], [0, 3, 3, 3, 3, 1]]
    tap = TapPoint(1, "block_out")
    states, _ = batch_taps(m, seqs, [tap], pad_id=1)
    for s, st_ in zip(seqs, states[tap]):
        single, _ = forward_with_tap(m, s, tap)
        assert st_.shape == (len(s), 16)
        np.testing.assert_allclose(st_, single.states, atol=1e-6)


def test_untrained_ce_near_uniform():
    corpus = make_splits(synth_corpus(0, 400), seed=0)
    m = TinyLM(ModelConfig(n_blocks=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(corpus.vocab)))
    ce = evaluate_ce(m, corpus.split("val"))
    assert abs(ce - math.log(len(corpus.vocab))) <= 0.05 * math.log(len(corpus.vocab))


def test_training_is_deterministic_and_learns(tmp_path):
    corpus = make_splits(synth_corpus(0, 400), seed=0)
    cfg = ModelConfig(n_blocks=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(corpus.vocab))
    a = train_victim(cfg, corpus, epochs=2, checkpoint_path=tmp_path / "v.ckpt")
    b = train_victim(cfg, corpus, epochs=2)
    assert a.history[-1]["train_loss"] == b.history[-1]["train_loss"]
    assert a.val_ce < math.log(len(corpus.vocab))
    back = TinyLM.load(tmp_path / "v.ckpt")
    assert back.config == cfg
    assert back.model_id() == a.model.model_id()
    assert back.meta["vocab"] == list(corpus.vocab.itos)


def test_training_divergence_aborts(monkeypatch):
    from revertlab import tinylm
    from revertlab.tinylm import VictimDivergence

    monkeypatch.setattr(tinylm, "victim_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    corpus = make_splits(synth_corpus(0, 200), seed=0)
    cfg = ModelConfig(n_blocks=2, d_model=16, n_heads=2, d_ff=32, vocab_size=len(corpus.vocab))
    with pytest.raises(VictimDivergence):
        train_victim(cfg, corpus, epochs=1)


def test_victim_gradient_check():
    torch.manual_seed(0)
    m = TinyLM(ModelConfig(n_blocks=2, d_model=8, n_heads=2, d_ff=16, vocab_size=20, max_seq_len=8))
    for p in m.parameters():
        # larger weights than the 0.02 init so the check is not dominated by round-off
        p.data.normal_(0, 0.5)
    seqs = [[0, 3, 4, 5, 1], [0, 7, 8, 1]]
    worst = finite_difference_check(m.train(), lambda: victim_loss(m, seqs, pad_id=1))
    assert worst <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(3, 39), min_size=1, max_size=10))
def test_traces_always_finite_and_shaped(body):
    m = _model()
    trace, _ = forward_with_tap(m, [0] + body + [1], TapPoint(2, "block_out"))
    assert trace.states.shape == (len(body) + 2, 16)
    assert np.isfinite(trace.states).all()


def test_case1_preset_has_classifier_head():
    cfg = ModelConfig.case1(vocab_size=30, n_blocks=2, d_model=16, n_heads=2, d_ff=32)
    m = TinyLM(cfg).eval()
    with torch.no_grad():
        out = m(_tokens(V=30))
    assert out.shape == (3, cfg.n_classes)
