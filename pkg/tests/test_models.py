import numpy as np
import pytest

from narslu.data import build_vocab
from narslu.models import (ArSluModel, EncoderConfig, FrontendError, NarSluModel, Subsampler,
                           build_model, load_model, preset, save_model, subsampled_length)
from narslu.models.decoder import DecoderLayer, block_log_softmax
from narslu.models.encoder import ConformerBlock, ConvModule
from narslu.models.config import DecoderConfig
from narslu.numerics import Tensor, functional as F, no_grad
from narslu.numerics.gradcheck import check_gradients
from narslu.numerics.nn import causal_mask, padding_mask

FEAT = 6


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["aa bb cc dd ee ff"], ["x_int", "y_int", "z_int"], ["when", "where"])


def tiny(kind, vocab, taps=(1,), seed=0, **kw):
    cfg = preset("desk", kind, len(vocab), FEAT, d_model=8, heads=2, ff_dim=16, kernel=3, layers=3,
                 dec_layers=2, max_frames=64, max_tokens=32,
                 **({"taps": taps, "tap_thresholds": (0.9,) * len(taps)} if kind == "sc-mask-ctc" else {}), **kw)
    return build_model(cfg, vocab, seed=seed)


def feats(rng, b, t):
    return rng.normal(size=(b, t, FEAT)).astype(np.float32)


# ------------------------------------------------------------- front-end
def _conv_len(t, k=3, s=2, pad=1):
    # direct arithmetic: windows of size k starting every s frames over pad + t frames
    return sum(1 for start in range(0, pad + t - k + 1, s))


@pytest.mark.parametrize("t_raw", range(4, 65))
def test_frontend_length_matches_conv_arithmetic(t_raw):
    sub = Subsampler(np.random.default_rng(0), FEAT, 8)
    with no_grad():
        out, lens = sub(Tensor(np.zeros((1, t_raw, FEAT))), np.array([t_raw]))
    expected = _conv_len(_conv_len(t_raw))
    assert out.shape[1] == expected == int(subsampled_length(t_raw)) == t_raw // 4


def test_frontend_examples():
    assert subsampled_length(16) == 4
    for t in range(4, 200):
        assert abs(int(subsampled_length(2 * t)) - 2 * int(subsampled_length(t))) <= 1
    sub = Subsampler(np.random.default_rng(0), FEAT, 8)
    with pytest.raises(FrontendError):
        sub(Tensor(np.zeros((1, 3, FEAT))), np.array([3]))


def test_padding_does_not_leak(vocab):
    m = tiny("mask-ctc", vocab)
    rng = np.random.default_rng(1)
    a, b = feats(rng, 1, 21), feats(rng, 1, 40)
    batch = np.zeros((2, 40, FEAT), np.float32)
    batch[0, :21], batch[1] = a[0], b[0]
    with no_grad():
        alone = m.encode(Tensor(a), [21])
        both = m.encode(Tensor(batch), [21, 40])
    t = int(alone.lengths[0])
    np.testing.assert_allclose(both.x.data[0, :t], alone.x.data[0], atol=1e-5)
    np.testing.assert_allclose(both.log_probs.data[0, :t], alone.log_probs.data[0], atol=1e-5)


# -------------------------------------------------------------- encoder
def test_no_taps_plain_encoder(vocab):
    m = tiny("mask-ctc", vocab)
    with no_grad():
        out = m.encode(Tensor(feats(np.random.default_rng(0), 2, 24)), [24, 20])
    assert out.intermediates == []
    assert out.x.shape == (2, 6, 8)
    np.testing.assert_allclose(np.exp(out.log_probs.data).sum(-1), 1.0, atol=1e-5)


def test_zero_hook_equals_norm_only_path(vocab):
    m = tiny("sc-mask-ctc", vocab, taps=(1, 2))
    x = Tensor(feats(np.random.default_rng(0), 2, 24))
    with no_grad():
        ref = m.encode(x, [24, 17], self_condition=False)
        zero = m.encode(x, [24, 17], hook=lambda p: np.zeros(p.log_probs.shape, np.float32))
        plain = m.encode(x, [24, 17])
    assert np.array_equal(ref.x.data, zero.x.data)
    assert not np.allclose(ref.x.data, plain.x.data)
    assert len(zero.intermediates) == 2


def test_zero_projection_is_additive_identity(vocab):
    m = tiny("sc-mask-ctc", vocab, taps=(1, 2))
    m.encoder.cond_proj.weight.data[:] = 0.0
    x = Tensor(feats(np.random.default_rng(2), 2, 24))
    with no_grad():
        a = m.encode(x, [24, 24])
        b = m.encode(x, [24, 24], self_condition=False)
    assert np.array_equal(a.x.data, b.x.data)
    assert np.array_equal(a.log_probs.data, b.log_probs.data)


def test_tap_projection_shared(vocab):
    m = tiny("sc-mask-ctc", vocab, taps=(1, 2))
    names = [n for n, _ in m.named_parameters() if "cond_proj" in n]
    assert names == ["encoder.cond_proj.weight"]
    x = Tensor(feats(np.random.default_rng(3), 1, 24))
    with no_grad():
        before = m.encode(x, [24])
        m.encoder.cond_proj.weight.data += np.random.default_rng(0).normal(0, 0.5, size=(len(vocab), 8))
        after = m.encode(x, [24])
    # tap 1's posterior precedes any conditioning; tap 2 and the output see the change
    assert np.array_equal(before.intermediates[0].log_probs.data, after.intermediates[0].log_probs.data)
    assert not np.allclose(before.intermediates[1].log_probs.data, after.intermediates[1].log_probs.data)
    assert not np.allclose(before.x.data, after.x.data)


def test_tap_projection_gradient_collects_every_tap(vocab):
    m = tiny("sc-mask-ctc", vocab, taps=(1, 2)).astype(np.float64)
    x = Tensor(feats(np.random.default_rng(4), 1, 24).astype(np.float64))
    w = m.encoder.cond_proj.weight
    rng = np.random.default_rng(0)
    proj = rng.normal(size=(1, 6, 8))

    def loss():
        return F.sum(m.encode(x, [24]).x * proj)

    assert check_gradients(loss, [w], eps=1e-4, samples=25, rng=rng) < 1e-4
    # the single weight collects gradient from both taps: its gradient differs from the one-tap model's
    w.grad = None
    from narslu.numerics import backward
    backward(loss())
    both = w.grad.copy()
    one = tiny("sc-mask-ctc", vocab, taps=(2,)).astype(np.float64)
    one.load_state_dict(m.state_dict())
    one.encoder.cond_proj.weight.grad = None
    backward(F.sum(one.encode(x, [24]).x * proj))
    assert np.abs(both).sum() > 0 and not np.allclose(both, one.encoder.cond_proj.weight.grad)


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, vocab_size=10, taps=(2, 2), layers=4).validate()
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, vocab_size=10, taps=(4,), layers=4).validate()
    with pytest.raises(ValueError):
        EncoderConfig(input_dim=4, vocab_size=10, d_model=10, heads=3).validate()
    EncoderConfig(input_dim=4, vocab_size=10, taps=(1, 3), layers=4).validate()


def test_presets():
    desk = preset("desk", "sc-mask-ctc", 60, 16)
    assert (desk.encoder.layers, desk.encoder.d_model, desk.encoder.heads, desk.encoder.ff_dim,
            desk.encoder.kernel, desk.encoder.taps, desk.decoder.layers) == (4, 64, 2, 256, 7, (2,), 2)
    large = preset("paper-slurp", "sc-mask-ctc", 688, 83)
    assert (large.encoder.layers, large.encoder.d_model, large.encoder.heads, large.encoder.ff_dim,
            large.encoder.kernel, large.encoder.taps, large.decoder.layers) == (12, 256, 4, 2048, 15, (3, 6, 9), 6)
    assert preset("desk", "mask-ctc", 60, 16).encoder.taps == ()
    with pytest.raises(ValueError):
        preset("huge", "ar", 60, 16)


def test_forwards_finite_on_random_inputs(vocab):
    rng = np.random.default_rng(5)
    for kind in ("mask-ctc", "sc-mask-ctc", "ar"):
        m = tiny(kind, vocab)
        with no_grad():
            enc = m.encode(Tensor(feats(rng, 3, 30) * 3), [30, 12, 25])
            assert np.all(np.isfinite(enc.x.data)) and np.all(np.isfinite(enc.log_probs.data))
            ids = rng.integers(5, len(vocab), size=(3, 5))
            if kind == "ar":
                out = m.decode_parallel(ids, [5, 3, 4], enc.x, enc.lengths)
                arrays = [out.asr_logits.data, out.slu_logits.data]
            else:
                out = m.cmlm(ids, [5, 3, 4], enc.x, enc.lengths)
                arrays = [out.asr_log_probs.data, out.slu_log_probs.data]
            assert all(np.all(np.isfinite(a)) for a in arrays)


# ----------------------------------------------------------------- CMLM
@pytest.fixture(scope="module")
def nar(vocab):
    m = tiny("mask-ctc", vocab)
    with no_grad():
        enc = m.encode(Tensor(feats(np.random.default_rng(6), 1, 28)), [28])
    return m, enc


def test_cmlm_cls_only(nar, vocab):
    m, enc = nar
    with no_grad():
        out = m.cmlm([[vocab.cls]], [1], enc.x, enc.lengths)
    assert out.asr_log_probs.shape[1] == 0
    intent = np.exp(out.intent_log_probs().data[0])
    assert intent.shape == (len(vocab.intent_block),)
    assert intent.sum() == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_allclose(np.exp(out.slu_log_probs.data).sum(-1), 1.0, atol=1e-5)


def test_cmlm_positions_matter(nar, vocab):
    m, enc = nar
    a, b = vocab.id("aa"), vocab.id("cc")
    with no_grad():
        x = m.cmlm([[vocab.cls, a, b, vocab.mask]], [4], enc.x, enc.lengths)
        y = m.cmlm([[vocab.cls, b, a, vocab.mask]], [4], enc.x, enc.lengths)
    assert not np.allclose(x.asr_log_probs.data[0, 2], y.asr_log_probs.data[0, 2])


def test_cmlm_bidirectional(nar, vocab):
    m, enc = nar
    with no_grad():
        x = m.cmlm([[vocab.cls, vocab.mask, vocab.id("aa")]], [3], enc.x, enc.lengths)
        y = m.cmlm([[vocab.cls, vocab.mask, vocab.id("ff")]], [3], enc.x, enc.lengths)
    assert not np.allclose(x.asr_log_probs.data[0, 0], y.asr_log_probs.data[0, 0])


def test_cmlm_cross_attention_ablation(vocab):
    m = tiny("mask-ctc", vocab)
    for layer in m.decoder.layers:
        layer.src_att.out.weight.data[:] = 0.0
    rng = np.random.default_rng(7)
    ids = [[vocab.cls, vocab.id("bb"), vocab.mask]]
    with no_grad():
        e1 = m.encode(Tensor(feats(rng, 1, 20)), [20])
        e2 = m.encode(Tensor(feats(rng, 1, 36)), [36])
        a = m.cmlm(ids, [3], e1.x, e1.lengths)
        b = m.cmlm(ids, [3], e2.x, e2.lengths)
    assert np.max(np.abs(a.hidden.data - b.hidden.data)) == 0.0
    assert np.max(np.abs(a.slu_logits.data - b.slu_logits.data)) == 0.0


def test_block_log_softmax_normalised(vocab):
    logits = Tensor(np.random.default_rng(0).normal(size=(2, len(vocab))))
    for block in (vocab.asr_block, vocab.intent_block, vocab.slot_block):
        lp = block_log_softmax(logits, block)
        assert lp.shape == (2, len(block))
        np.testing.assert_allclose(np.exp(lp.data).sum(-1), 1.0)


# ------------------------------------------------------------------- AR
@pytest.fixture(scope="module")
def ar64(vocab):
    m = tiny("ar", vocab).astype(np.float64)
    with no_grad():
        enc = m.encode(Tensor(feats(np.random.default_rng(8), 1, 32).astype(np.float64)), [32])
    return m, enc


def test_ar_future_blindness(ar64, vocab):
    m, enc = ar64
    prefix = [m.sos, vocab.id("aa"), vocab.id("bb")]
    with no_grad():
        short = m.decode_parallel([prefix], [3], enc.x, enc.lengths)
        long = m.decode_parallel([prefix + [vocab.id("ee")]], [4], enc.x, enc.lengths)
    assert np.array_equal(short.asr_logits.data[0], long.asr_logits.data[0, :3])
    assert np.array_equal(short.slu_logits.data[0], long.slu_logits.data[0, :3])


def test_ar_incremental_matches_parallel(ar64, vocab):
    m, enc = ar64
    seq = [m.sos, vocab.id("cc"), vocab.id("aa"), vocab.id("dd")]
    mem_mask = padding_mask(enc.lengths, enc.x.shape[1], np.float64)
    with no_grad():
        par = m.decode_parallel([seq], [len(seq)], enc.x, enc.lengths)
        cache = None
        for j, tok in enumerate(seq):
            asr, slu, cache = m.decoder.step(np.array([tok]), cache, enc.x, mem_mask)
            assert np.max(np.abs(asr.data[0] - par.asr_logits.data[0, j])) <= 1e-5
            assert np.max(np.abs(slu.data[0] - par.slu_logits.data[0, j])) <= 1e-5


def test_ar_first_step_sees_only_start_and_memory(ar64, vocab):
    m, enc = ar64
    mem_mask = padding_mask(enc.lengths, enc.x.shape[1], np.float64)
    with no_grad():
        a, _, _ = m.decoder.step(np.array([m.sos]), None, enc.x, mem_mask)
        b = m.decode_parallel([[m.sos, vocab.id("ff")]], [2], enc.x, enc.lengths)
    np.testing.assert_allclose(a.data[0], b.asr_logits.data[0, 0], atol=1e-10)


# ------------------------------------------------------------ gradchecks
def _layer_check(fn, module, rng, samples=30):
    module.astype(np.float64)
    return check_gradients(fn, module.parameters(), eps=1e-4, samples=samples, rng=rng)


def test_layer_gradients():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True, dtype=np.float64)
    frame_mask = np.ones((2, 7, 1))
    frame_mask[1, 5:] = 0
    key_mask = padding_mask([7, 5], 7, np.float64)
    proj = rng.normal(size=(2, 7, 8))

    cfg = EncoderConfig(input_dim=8, vocab_size=10, d_model=8, heads=2, ff_dim=16, kernel=3)
    conv = ConvModule(rng, 8, 3)
    assert _layer_check(lambda: F.sum(conv(x, frame_mask) * proj), conv, rng) < 1e-4
    block = ConformerBlock(rng, cfg)
    assert _layer_check(lambda: F.sum(block(x, key_mask, frame_mask) * proj), block, rng) < 1e-4
    assert check_gradients(lambda: F.sum(block(x, key_mask, frame_mask) * proj), [x], eps=1e-4,
                           samples=20, rng=rng) < 1e-4

    sub = Subsampler(rng, 8, 8)
    xs = Tensor(rng.normal(size=(1, 16, 8)), dtype=np.float64)
    p4 = rng.normal(size=(1, 4, 8))
    assert _layer_check(lambda: F.sum(sub(xs, np.array([16]))[0] * p4), sub, rng) < 1e-4

    dec = DecoderLayer(rng, DecoderConfig(vocab_size=10, d_model=8, heads=2, ff_dim=16))
    y = Tensor(rng.normal(size=(2, 4, 8)), dtype=np.float64)
    self_mask = padding_mask([4, 3], 4, np.float64) + causal_mask(4, np.float64)
    p_dec = rng.normal(size=(2, 4, 8))
    assert _layer_check(lambda: F.sum(dec(y, self_mask, x, key_mask) * p_dec), dec, rng) < 1e-4


def test_encoder_gradients(vocab):
    m = tiny("sc-mask-ctc", vocab, taps=(1, 2)).astype(np.float64)
    rng = np.random.default_rng(10)
    x = Tensor(feats(rng, 2, 20).astype(np.float64))
    proj = rng.normal(size=(2, 5, len(vocab)))
    enc = m.encoder
    assert check_gradients(lambda: F.sum(enc(x, [20, 17]).log_probs * proj), enc.parameters(), eps=1e-4,
                           samples=30, rng=rng) < 1e-4


# ------------------------------------------------------------ checkpoint
def test_model_save_load_round_trip(tmp_path, vocab):
    m = tiny("sc-mask-ctc", vocab, taps=(1,), seed=3)
    save_model(tmp_path / "m.ckpt", m, meta={"note": "x"})
    m2, extra, header = load_model(tmp_path / "m.ckpt")
    assert isinstance(m2, NarSluModel) and header["note"] == "x" and extra == {}
    assert m2.config == m.config and m2.vocab.symbols == vocab.symbols
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    a = tiny("ar", vocab)
    save_model(tmp_path / "a.ckpt", a)
    assert isinstance(load_model(tmp_path / "a.ckpt")[0], ArSluModel)


def test_model_rejects_vocab_mismatch(vocab):
    cfg = preset("desk", "mask-ctc", len(vocab) + 1, FEAT)
    with pytest.raises(ValueError):
        build_model(cfg, vocab)
