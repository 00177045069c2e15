import json
import math

import numpy as np
import pytest

from narslu.data import SynthConfig, build_vocab, collate, synth_generate
from narslu.models import CmlmOutput, build_model, preset
from narslu.numerics import Tensor, no_grad
from narslu.numerics.gradcheck import check_gradients
from narslu.train import (LossWeights, TrainConfig, TrainingDivergedError, ar_terms, combine_ar, combine_mask_ctc,
                          combine_sc_ctc, combine_sc_mask_ctc, ctc_term, dev_loss, load_training_checkpoint,
                          loss_ar, loss_cmlm, loss_mask_ctc, loss_sc_ctc, loss_sc_mask_ctc, loss_slu,
                          loss_slu_parts, nar_terms, save_training_checkpoint, train, train_step)
from narslu.train import TrainState


@pytest.fixture(scope="module")
def slurp_vocab():
    words = " ".join(f"w{i:03d}" for i in range(500))
    return build_vocab([words], [f"intent{i:02d}" for i in range(70)], [f"slot{i:02d}" for i in range(56)])


def _cmlm_output(vocab, asr_logits, slu_logits):
    b, length, _ = asr_logits.shape
    return CmlmOutput(Tensor(np.zeros((b, length, 2))), Tensor(asr_logits), Tensor(slu_logits),
                      np.full(b, length), vocab)


# ------------------------------------------------------------ CMLM / SLU terms
def test_cmlm_loss_perfect_and_uniform(slurp_vocab):
    v = slurp_vocab
    targets = [[v.id("w001"), v.id("w042"), v.id("w499")]]
    logits = np.zeros((1, 4, len(v)))
    for n, t in enumerate(targets[0]):
        logits[0, n + 1, t] = 1e4
    out = _cmlm_output(v, logits, np.zeros_like(logits))
    assert loss_cmlm(out, [[0, 2]], targets).item() == 0.0
    uniform = _cmlm_output(v, np.random.default_rng(0).normal(size=(1, 4, len(v))) * 0, np.zeros_like(logits))
    assert loss_cmlm(uniform, [[0, 1, 2]], targets).item() == pytest.approx(math.log(500))


def test_cmlm_loss_ignores_unmasked_positions(slurp_vocab):
    v = slurp_vocab
    rng = np.random.default_rng(1)
    targets = [[v.id("w003"), v.id("w004"), v.id("w005"), v.id("w006")]]
    logits = rng.normal(size=(1, 5, len(v)))
    base = loss_cmlm(_cmlm_output(v, logits, logits), [[1, 3]], targets).item()
    perturbed = logits.copy()
    perturbed[0, [0, 1, 3]] += rng.normal(size=(3, len(v))) * 5  # CLS and transcript tokens 0, 2
    assert loss_cmlm(_cmlm_output(v, perturbed, logits), [[1, 3]], targets).item() == base
    with pytest.raises(ValueError):
        loss_cmlm(_cmlm_output(v, logits, logits), [[]], targets)


def test_slu_loss_perfect_and_uniform(slurp_vocab):
    v = slurp_vocab
    n = 3
    intent = v.intent_id("intent05")
    slots = [v.outside, v.slot_tag_id("B", "slot07"), v.slot_tag_id("I", "slot07")]
    logits = np.zeros((1, n + 1, len(v)))
    assert len(v.intent_block) == 70 and len(v.slot_block) == 113
    uniform = _cmlm_output(v, logits, logits)
    assert loss_slu(uniform, [intent], [slots]).item() == pytest.approx(math.log(70) + n * math.log(113))
    sharp = logits.copy()
    sharp[0, 0, intent] = 1e4
    for i, s in enumerate(slots):
        sharp[0, i + 1, s] = 1e4
    assert loss_slu(_cmlm_output(v, logits, sharp), [intent], [slots]).item() == 0.0


def test_slu_intent_term_independent_of_slot_logits(slurp_vocab):
    v = slurp_vocab
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(2, 3, len(v)))
    intents = [v.intent_id("intent01"), v.intent_id("intent02")]
    slots = [[v.outside, v.outside], [v.slot_tag_id("B", "slot00"), v.outside]]
    a_int, a_slot = loss_slu_parts(_cmlm_output(v, logits, logits), intents, slots)
    other = logits.copy()
    other[:, 1:] += rng.normal(size=(2, 2, len(v)))
    b_int, b_slot = loss_slu_parts(_cmlm_output(v, logits, other), intents, slots)
    assert a_int.item() == b_int.item()
    assert a_slot.item() != b_slot.item()


# ------------------------------------------------------------ composites
@pytest.fixture(scope="module")
def synth():
    utts, vocab = synth_generate(SynthConfig(n_utterances=6, min_frames=5, max_frames=6, max_words=5), seed=0)
    return utts, vocab


def small(kind, vocab, taps=(1,), seed=0):
    extra = {"taps": taps, "tap_thresholds": (0.5,) * len(taps)} if kind == "sc-mask-ctc" else {}
    cfg = preset("desk", kind, len(vocab), 16, d_model=8, heads=2, ff_dim=16, kernel=3, layers=3, dec_layers=1,
                 max_frames=64, max_tokens=32, **extra)
    return build_model(cfg, vocab, seed=seed)


def wide(kind, vocab, taps=(1,)):
    return small(kind, vocab, taps).astype(np.float64)


def wide_batch(utts, vocab):
    batch = collate(utts, vocab)
    batch.features = batch.features.astype(np.float64)
    return batch


def _rng():
    return np.random.default_rng(123)


def test_mask_ctc_endpoint_and_recomposition(synth):
    utts, v = synth
    batch = wide_batch(utts, v)
    m = wide("mask-ctc", v)
    with no_grad():
        pure_ctc = ctc_term(m.encode_batch(batch).log_probs, m.encode_batch(batch).lengths, batch.token_lists())
        at_one, _ = loss_mask_ctc(batch, m, LossWeights(lam=1.0), _rng())
        assert abs(at_one.item() - pure_ctc.item()) <= 1e-6
        total, terms = loss_mask_ctc(batch, m, LossWeights(), _rng())
        independent = nar_terms(batch, m, _rng())
    by_hand = 0.4 * independent["ctc"].item() + 0.6 * (0.5 * independent["asr"].item()
                                                       + 0.5 * independent["slu"].item())
    assert abs(total.item() - by_hand) <= 1e-6


def test_sc_ctc_endpoints_and_mean(synth):
    utts, v = synth
    batch = wide_batch(utts, v)
    with no_grad():
        m1 = wide("sc-mask-ctc", v, taps=(1,))
        enc = m1.encode_batch(batch)
        final = ctc_term(enc.log_probs, enc.lengths, batch.token_lists()).item()
        tap = ctc_term(enc.intermediates[0].log_probs, enc.lengths, batch.token_lists()).item()
        assert abs(loss_sc_ctc(batch, m1, LossWeights(eta=1.0), _rng())[0].item() - final) <= 1e-6
        assert abs(loss_sc_ctc(batch, m1, LossWeights(eta=0.0), _rng())[0].item() - tap) <= 1e-6

        m2 = wide("sc-mask-ctc", v, taps=(1, 2))
        enc = m2.encode_batch(batch)
        per_tap = [ctc_term(p.log_probs, enc.lengths, batch.token_lists()).item() for p in enc.intermediates]
        final = ctc_term(enc.log_probs, enc.lengths, batch.token_lists()).item()
        got = loss_sc_ctc(batch, m2, LossWeights(eta=0.5), _rng())[0].item()
        assert abs(got - (0.5 * final + 0.5 * np.mean(per_tap))) <= 1e-6

        plain = wide("mask-ctc", v)
        with pytest.raises(ValueError):
            loss_sc_ctc(batch, plain, LossWeights(eta=0.5), _rng())


def test_sc_mask_ctc_endpoint_and_ablation(synth):
    utts, v = synth
    batch = wide_batch(utts, v)
    m = wide("sc-mask-ctc", v, taps=(1, 2))
    w = LossWeights()
    with no_grad():
        sc_only, _ = loss_sc_ctc(batch, m, w, _rng())
        mu_one, _ = loss_sc_mask_ctc(batch, m, LossWeights(mu=1.0), _rng(), feedback=False)
        assert abs(mu_one.item() - sc_only.item()) <= 1e-6
        no_fb, _ = loss_sc_mask_ctc(batch, m, w, _rng(), feedback=False)
        _, mc_terms = loss_mask_ctc(batch, m, w, _rng())
        cmlm_stage = 0.5 * mc_terms["asr"].item() + 0.5 * mc_terms["slu"].item()
        assert abs(no_fb.item() - (0.4 * sc_only.item() + 0.6 * cmlm_stage)) <= 1e-6
        with_fb, fb_terms = loss_sc_mask_ctc(batch, m, w, _rng(), feedback=True)
        assert abs(with_fb.item() - combine_sc_mask_ctc({k: t for k, t in fb_terms.items()}, w).item()) <= 1e-6
    # the feedback pass changes what later layers see
    assert with_fb.item() != no_fb.item()


def test_ar_endpoint_and_recomposition(synth):
    utts, v = synth
    batch = wide_batch(utts, v)
    m = wide("ar", v)
    with no_grad():
        enc = m.encode_batch(batch)
        pure = ctc_term(enc.log_probs, enc.lengths, batch.token_lists()).item()
        assert abs(loss_ar(batch, m, LossWeights(ar_ctc=1.0))[0].item() - pure) <= 1e-6
        total, _ = loss_ar(batch, m, LossWeights())
        terms = ar_terms(batch, m)
    assert abs(total.item() - (0.3 * terms["ctc"].item() + 0.7 * (terms["asr"].item() + terms["slu"].item()))) <= 1e-6
    zero = {"ctc": Tensor(5.0), "asr": Tensor(0.0), "slu": Tensor(0.0)}
    assert combine_ar(zero, LossWeights(ar_ctc=0.0)).item() == 0.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lam=1.5).validate()
    with pytest.raises(ValueError):
        combine_sc_ctc({"ctc": Tensor(1.0)}, LossWeights(eta=0.3))
    assert combine_sc_ctc({"ctc": Tensor(2.0)}, LossWeights(eta=1.0)).item() == 2.0
    assert combine_mask_ctc({"ctc": Tensor(2.0), "asr": Tensor(1.0), "slu": Tensor(3.0)},
                            LossWeights(lam=1.0)).item() == 2.0


# ------------------------------------------------------------ full-model gradient checks
def _with_frozen_feedback(model):
    """Hook-equivalent that replays the first call's feedback offset (aug - Z) as a constant."""
    from narslu.infer import tap_feedback
    offsets = {}

    def hook(pred):
        if pred.layer not in offsets:
            offsets[pred.layer] = tap_feedback(model, pred, 0.5) - pred.probs
        return pred.probs + offsets[pred.layer]

    return hook


@pytest.mark.parametrize("kind", ["mask-ctc", "sc-mask-ctc", "ar"])
def test_full_model_gradients(synth, kind):
    utts, v = synth
    batch = collate(utts[:3], v)
    m = small(kind, v, taps=(1, 2)).astype(np.float64)
    batch.features = batch.features.astype(np.float64)
    w = LossWeights()
    if kind == "ar":
        def loss():
            return combine_ar(ar_terms(batch, m), w)
    elif kind == "mask-ctc":
        def loss():
            return combine_mask_ctc(nar_terms(batch, m, _rng()), w)
    else:
        hook = _with_frozen_feedback(m)

        def loss():
            from narslu.train import cmlm_inputs
            targets = batch.token_lists()
            enc = m.encode(Tensor(batch.features), batch.feature_lengths, hook=hook)
            terms = {"ctc": ctc_term(enc.log_probs, enc.lengths, targets)}
            terms["inter"] = (ctc_term(enc.intermediates[0].log_probs, enc.lengths, targets)
                              + ctc_term(enc.intermediates[1].log_probs, enc.lengths, targets)) / 2
            ids, lengths, masked = cmlm_inputs(batch, m, _rng())
            out = m.cmlm(ids, lengths, enc.x, enc.lengths)
            terms["asr"] = loss_cmlm(out, masked, targets)
            terms["slu"] = loss_slu(out, batch.intents, batch.slot_lists())
            return combine_sc_mask_ctc(terms, w)

    err = check_gradients(loss, m.parameters(), eps=1e-4, samples=24, rng=np.random.default_rng(7))
    assert err <= 1e-3


# ------------------------------------------------------------ training loop
@pytest.fixture(scope="module")
def tiny_data():
    cfg = SynthConfig(n_utterances=24, min_frames=5, max_frames=6, max_words=5)
    train_set, vocab = synth_generate(cfg, seed=0)
    dev_set, _ = synth_generate(SynthConfig(**{**cfg.to_dict(), "n_utterances": 8}), seed=1)
    return train_set, dev_set, vocab


def _params(m):
    return {k: p.data.copy() for k, p in m.named_parameters()}


def test_zero_epochs_leaves_params(tiny_data):
    tr, dev, v = tiny_data
    m = small("mask-ctc", v)
    before = _params(m)
    state = train(m, tr, dev, TrainConfig(epochs=0, batch_size=8))
    assert state.epoch == 0 and state.history == []
    assert all(np.array_equal(before[k], p.data) for k, p in m.named_parameters())


@pytest.mark.parametrize("kind", ["mask-ctc", "sc-mask-ctc", "ar"])
def test_same_seed_same_curve(tiny_data, kind):
    tr, dev, v = tiny_data
    cfg = TrainConfig(epochs=2, batch_size=8, decode_dev=False)
    curves = []
    for _ in range(2):
        m = small(kind, v)
        state = train(m, tr, dev, cfg)
        curves.append([(r["losses"], r["dev_loss"]) for r in state.history])
    assert curves[0] == curves[1]


def test_resume_is_bit_identical(tmp_path, tiny_data):
    tr, dev, v = tiny_data
    cfg = TrainConfig(epochs=2, batch_size=8, decode_dev=False, seed=3)
    straight = small("sc-mask-ctc", v)
    train(straight, tr, dev, cfg, out_dir=tmp_path / "a")

    first = small("sc-mask-ctc", v)
    train(first, tr, dev, TrainConfig(**{**cfg.__dict__, "epochs": 1}), out_dir=tmp_path / "b")
    resumed, state = load_training_checkpoint(tmp_path / "b" / "last.ckpt")
    train(resumed, tr, dev, cfg, out_dir=tmp_path / "b", state=state)
    for (n1, p1), (n2, p2) in zip(straight.named_parameters(), resumed.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data), n1
    a = (tmp_path / "a" / "last.ckpt").read_bytes()
    b = (tmp_path / "b" / "last.ckpt").read_bytes()
    assert a == b
    log = [json.loads(line) for line in (tmp_path / "b" / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]
    assert {"losses", "dev_loss", "wall_time"} <= set(log[0])


def test_checkpoint_round_trip_then_step(tmp_path, tiny_data):
    tr, _, v = tiny_data
    cfg = TrainConfig(batch_size=8)
    batch = collate(tr[:8], v)
    m = small("mask-ctc", v)
    rng = np.random.default_rng(0)
    opt, _ = train_step(m, batch, TrainState().optimizer, cfg, rng)
    state = TrainState(epoch=1, optimizer=opt, rng_state=rng.bit_generator.state)
    save_training_checkpoint(tmp_path / "c.ckpt", m, state)
    m2, state2 = load_training_checkpoint(tmp_path / "c.ckpt")
    rng2 = np.random.default_rng(0)
    rng2.bit_generator.state = state2.rng_state
    train_step(m, batch, opt, cfg, rng)
    train_step(m2, batch, state2.optimizer, cfg, rng2)
    for (_, p1), (_, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert np.array_equal(p1.data, p2.data)


def test_nan_loss_aborts_with_snapshot(tmp_path, tiny_data):
    tr, dev, v = tiny_data
    m = small("mask-ctc", v)
    m.encoder.ctc_head.bias.data[0] = np.nan
    with pytest.raises(TrainingDivergedError):
        train(m, tr, dev, TrainConfig(epochs=1, batch_size=8, decode_dev=False), out_dir=tmp_path)
    assert (tmp_path / "nan_snapshot.ckpt").exists()


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["mask-ctc", "sc-mask-ctc", "ar"])
def test_smoke_training_reduces_dev_loss(kind):
    tr, v = synth_generate(SynthConfig(), seed=0, prefix="train")
    dev, _ = synth_generate(SynthConfig(n_utterances=200), seed=1, prefix="dev")
    m = build_model(preset("desk", kind, len(v), 16), v, seed=0)
    cfg = TrainConfig(epochs=5, decode_dev=False)
    initial = dev_loss(m, dev, cfg)
    state = train(m, tr, dev, cfg)
    assert state.history[-1]["dev_loss"] < initial
