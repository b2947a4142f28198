import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from binsem.corpus import EOS, MASK, N_SPECIALS, PAD, SOS, TokenSequence, build_vocab, encode
from binsem.encoder import (
    IGNORE,
    EncoderConfig,
    OptimizerConfig,
    attention,
    build_model,
    embed_function,
    evaluate_mlm,
    export_attention,
    linear_schedule,
    load_checkpoint,
    mask_batch,
    mlm_loss,
    parameter_count,
    pretrain,
    read_log,
    save_checkpoint,
)
from binsem.errors import ValidationError
from binsem.synth import toy_mlm_corpus

from oracles import attention_loop, finite_difference_check


def tiny_config(**over):
    base = dict(vocab_size=8, d_embed=4, d_hidden=4, n_layers=1, n_heads=2, max_seq=6,
                n_conv_layers=1, conv_kernel=3, d_ffn=8, dropout_pos=0.0, dropout_conv=0.0,
                dropout_ffn=0.0, dropout_attn=0.0)
    base.update(over)
    return EncoderConfig(**base)


def random_seqs(n, cfg, rng, min_len=1):
    out = []
    for _ in range(n):
        k = int(rng.integers(min_len, cfg.max_seq - 1))
        ids = np.full(cfg.max_seq, PAD, dtype=np.int64)
        ids[0] = SOS
        ids[1:k + 1] = rng.integers(N_SPECIALS, cfg.vocab_size, size=k)
        ids[k + 1] = EOS
        out.append(TokenSequence(ids, k + 2))
    return out


# attention --------------------------------------------------------------


def test_attention_matches_scalar_loop():
    q = [[0.3, -1.2], [2.0, 0.5]]
    k = [[1.0, 0.1], [-0.7, 0.9]]
    v = [[0.25, -2.0], [1.5, 0.75]]
    ctx, w = attention(*(torch.tensor(x, dtype=torch.float64) for x in (q, k, v)))
    ref_ctx, ref_w = attention_loop(q, k, v)
    assert np.allclose(ctx.numpy(), ref_ctx, atol=1e-9, rtol=0)
    assert np.allclose(w.numpy(), ref_w, atol=1e-9, rtol=0)


def test_attention_key_mask_matches_loop():
    g = torch.Generator().manual_seed(1)
    q, k, v = (torch.randn(3, 4, generator=g, dtype=torch.float64) for _ in range(3))
    mask = torch.tensor([True, False, True])
    ctx, w = attention(q, k, v, mask)
    ref_ctx, ref_w = attention_loop(q.tolist(), k.tolist(), v.tolist(), mask.tolist())
    assert np.allclose(ctx.numpy(), ref_ctx, atol=1e-9)
    assert np.allclose(w.numpy(), ref_w, atol=1e-9)
    assert (w[:, 1] == 0).all()


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2 ** 31))
@settings(max_examples=40)
def test_attention_rows_sum_to_one(n, m, d, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(2, n, d, generator=g, dtype=torch.float64) * 5
    k = torch.randn(2, m, d, generator=g, dtype=torch.float64) * 5
    v = torch.randn(2, m, d, generator=g, dtype=torch.float64)
    _, w = attention(q, k, v)
    assert torch.allclose(w.sum(-1), torch.ones(2, n, dtype=torch.float64), atol=1e-6)


def test_attention_shape_mismatch():
    with pytest.raises(ValidationError):
        attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 3))


# model ------------------------------------------------------------------


def test_gradient_check_double_precision():
    cfg = tiny_config()
    model = build_model(cfg, seed=0).double()
    assert model.n_parameters() <= 1000
    model.eval()
    rng = np.random.default_rng(0)
    seqs = random_seqs(3, cfg, rng, min_len=2)
    batch = mask_batch(seqs, dataclasses.replace(cfg, mask_rate=0.5), rng)
    batch.mask_positions[:, 1] = True
    batch.targets[:, 1] = torch.as_tensor([s.ids[1] for s in seqs])
    params = [p for p in model.parameters()]
    err = finite_difference_check(lambda: mlm_loss(model, batch), params)
    assert err < 1e-4


@given(st.integers(5, 40), st.sampled_from([8, 16]), st.integers(0, 2), st.integers(1, 2),
       st.integers(0, 3), st.booleans())
@settings(max_examples=25)
def test_parameter_count_formula(vocab, hidden, layers, heads, conv_layers, conv):
    cfg = EncoderConfig(vocab_size=vocab, d_embed=12, d_hidden=hidden, n_layers=layers, n_heads=heads,
                        max_seq=10, n_conv_layers=conv_layers, conv_kernel=3, conv_enabled=conv)
    assert build_model(cfg).n_parameters() == parameter_count(cfg)


def test_full_configuration_size():
    cfg = EncoderConfig.paper(vocab_size=17_225)
    assert (cfg.d_embed, cfg.d_hidden, cfg.n_layers, cfg.n_heads, cfg.max_seq) == (256, 128, 8, 8, 256)
    assert parameter_count(cfg) == 8_611_401


def test_padding_does_not_change_real_positions():
    cfg = tiny_config(max_seq=12)
    model = build_model(cfg, seed=3)
    model.eval()
    ids = torch.tensor([[SOS, 5, 6, 7, EOS] + [PAD] * 7])
    with torch.no_grad():
        h_full = model.encode(ids)[0, :5]
        h_trim = model.encode(ids[:, :5])[0]
    assert torch.allclose(h_full, h_trim, atol=1e-6)


def test_padding_invariance_of_embedding():
    vocab = build_vocab(toy_mlm_corpus(5))
    model = build_model(EncoderConfig.desk(len(vocab)), seed=0)
    nf = toy_mlm_corpus(1, seed=4)[0]
    a = embed_function(model, encode(nf, vocab, 64))
    ids = torch.as_tensor(encode(nf, vocab, 64).ids[None])
    b = embed_function(model, ids[:, : len(nf.tokens) + 2])
    assert torch.allclose(a, b[0], atol=1e-5)


def test_attention_export_shape_and_normalization():
    cfg = tiny_config(max_seq=8)
    model = build_model(cfg)
    seq = random_seqs(1, cfg, np.random.default_rng(1))[0]
    w = np.array(export_attention(model, seq))
    assert w.shape == (cfg.n_layers, cfg.n_heads, cfg.max_seq, cfg.max_seq)
    assert np.allclose(w.sum(-1), 1, atol=1e-6)
    assert np.all(w[..., seq.true_len:] == 0)


def test_encode_rejects_bad_ids():
    model = build_model(tiny_config())
    with pytest.raises(ValidationError):
        model.encode(torch.tensor([[SOS, 99, EOS]]))
    with pytest.raises(ValidationError):
        model.encode(torch.zeros(1, 9, dtype=torch.long))


# masking ----------------------------------------------------------------


def test_masking_statistics():
    cfg = EncoderConfig(vocab_size=60, max_seq=64)
    rng = np.random.default_rng(0)
    seqs = random_seqs(400, cfg, rng, min_len=30)
    batch = mask_batch(seqs, cfg, np.random.default_rng(1))
    ids = torch.as_tensor(np.stack([s.ids for s in seqs]))
    eligible = ids >= N_SPECIALS
    n = int(eligible.sum())
    assert n >= 10_000
    sel = batch.mask_positions
    k = int(sel.sum())
    sd = math.sqrt(n * 0.15 * 0.85)
    assert abs(k - 0.15 * n) <= 3 * sd
    assert not (sel & ~eligible).any()
    assert (batch.inputs[~eligible] == ids[~eligible]).all()
    masked = int((batch.inputs[sel] == MASK).sum())
    changed = int(((batch.inputs[sel] != MASK) & (batch.inputs[sel] != ids[sel])).sum())
    same = int((batch.inputs[sel] == ids[sel]).sum())
    # a random replacement equal to the original counts as "same"
    p_same = 0.1 + 0.1 / (cfg.vocab_size - N_SPECIALS)
    for count, p in ((masked, 0.8), (changed, 0.1 - 0.1 / (cfg.vocab_size - N_SPECIALS)), (same, p_same)):
        assert abs(count - p * k) <= 3 * math.sqrt(k * p * (1 - p))
    assert (batch.targets[~sel] == IGNORE).all()
    assert (batch.targets[sel] == ids[sel]).all()
    assert int(batch.inputs[batch.inputs >= N_SPECIALS].min()) >= N_SPECIALS


def test_mlm_loss_requires_masks():
    cfg = tiny_config()
    model = build_model(cfg)
    batch = mask_batch(random_seqs(2, cfg, np.random.default_rng(0)), dataclasses.replace(cfg, mask_rate=1e-9),
                       np.random.default_rng(0))
    with pytest.raises(ValidationError):
        mlm_loss(model, batch)


# training ---------------------------------------------------------------


def test_linear_schedule():
    f = linear_schedule(10, 0.2)
    assert [round(f(s), 4) for s in range(10)] == [0.5, 1.0, 1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.125]


def small_run(seed, **opt):
    vocab = build_vocab(toy_mlm_corpus(30))
    cfg = dataclasses.replace(EncoderConfig.desk(len(vocab)), d_embed=16, d_hidden=16, n_layers=1)
    seqs = [encode(x, vocab, cfg.max_seq) for x in toy_mlm_corpus(30)]
    oc = dataclasses.replace(OptimizerConfig.desk(), epochs=2, **opt)
    return pretrain(seqs, cfg, oc, seed=seed), seqs, cfg, vocab, oc


def test_pretrain_deterministic():
    a = small_run(5)[0]
    b = small_run(5)[0]
    c = small_run(6)[0]
    assert a.log == b.log
    assert a.log != c.log
    for (na, ta), (nb, tb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert na == nb and torch.equal(ta, tb)


def test_zero_learning_rate_keeps_weights():
    vocab = build_vocab(toy_mlm_corpus(30))
    cfg = dataclasses.replace(EncoderConfig.desk(len(vocab)), d_embed=16, d_hidden=16, n_layers=1)
    before = build_model(cfg, seed=1).state_dict()
    result = small_run(1, lr=0.0)[0]
    for name, t in result.model.state_dict().items():
        assert torch.equal(t, before[name])


def test_checkpoint_round_trip(tmp_path):
    result, seqs, cfg, vocab, oc = small_run(2)
    save_checkpoint(tmp_path, result.model, vocab, oc, 2, result.log)
    ckpt = load_checkpoint(tmp_path)
    assert ckpt.vocab.hash == vocab.hash
    assert ckpt.config["n_parameters"] == result.model.n_parameters()
    assert read_log(tmp_path) == result.log
    ids = torch.as_tensor(np.stack([s.ids for s in seqs[:4]]))
    with torch.no_grad():
        assert torch.equal(ckpt.model(ids), result.model.eval()(ids))
    assert evaluate_mlm(ckpt.model, seqs, cfg, 0) == evaluate_mlm(result.model, seqs, cfg, 0)


def test_checkpoint_detects_vocab_tampering(tmp_path):
    result, _, _, vocab, oc = small_run(2)
    save_checkpoint(tmp_path, result.model, vocab, oc, 2, result.log)
    with open(tmp_path / "vocab.tsv", "a") as fp:
        fp.write("extra\t1\n")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path)


def test_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(vocab_size=10, d_hidden=10, n_heads=3).validate()
    with pytest.raises(ValidationError):
        OptimizerConfig(epochs=0).validate()
