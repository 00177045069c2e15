import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narslu.data import (BpePolicy, JointVocabulary, SynthConfig, SynthWorld, WordPolicy,
                         build_vocab, collate, detokenize, load_slurp_jsonl, make_batches, mask_targets,
                         read_features, synth_generate, tokenize, utterance_record, write_features)
from narslu.data.features import decode_features, encode_features
from narslu.data.tokenize import UnknownTokenError

TABLE1 = {"id": "t1", "transcript": "set lunch every day at twelve thirty", "intent": "calendar_set",
          "entities": [{"type": "meal_type", "filler": "lunch"},
                       {"type": "general_frequency", "filler": "every day"},
                       {"type": "time", "filler": "twelve thirty"}]}


@pytest.fixture
def table1_vocab():
    return build_vocab([TABLE1["transcript"]], ["calendar_set", "alarm_set"],
                       ["meal_type", "general_frequency", "time"])


# ------------------------------------------------------------- vocabulary
def test_slurp_scale_vocab_size():
    words = [f"w{i:03d}" for i in range(500)]
    v = build_vocab([" ".join(words)], [f"intent{i}" for i in range(70)], [f"slot{i}" for i in range(56)])
    assert len(v) == 500 + 70 + 113 + 5 == 688


def test_minimal_vocab_and_blocks():
    v = build_vocab(["hello"], ["greet"], ["name"])
    assert len(v) == 10
    blocks = [range(0, 5), v.asr_block, v.intent_block, v.slot_block]
    assert sum(len(b) for b in blocks) == len(v)
    for a, b in zip(blocks, blocks[1:]):
        assert a.stop == b.start
    assert len(v.slot_block) == 3


def test_vocab_round_trip_exhaustive(table1_vocab):
    v = table1_vocab
    for i in range(len(v)):
        assert v.id(v.symbol(i)) == i
    assert JointVocabulary.from_json(json.loads(json.dumps(v.to_json()))).symbols == v.symbols


def test_vocab_duplicates_rejected():
    with pytest.raises(ValueError):
        build_vocab(["a b"], ["x", "x"], ["s"])
    with pytest.raises(ValueError):
        build_vocab(["a"], [], ["s"])
    with pytest.raises(ValueError):
        build_vocab(["play"], ["play"], ["s"])  # collides across blocks


def test_vocab_sorted_within_blocks():
    v = build_vocab(["zeta alpha mid"], ["b_int", "a_int"], ["zz", "aa"])
    assert v.pieces == ["alpha", "mid", "zeta"]
    assert [v.symbol(i) for i in v.slot_block] == ["O", "B_aa", "I_aa", "B_zz", "I_zz"]


# ------------------------------------------------------------- tokenize
def test_word_tokenize_and_detokenize(table1_vocab):
    v = table1_vocab
    assert tokenize("set lunch", v) == [v.id("set"), v.id("lunch")]
    assert tokenize("", v) == []
    text = "set lunch every day"
    assert detokenize(tokenize(text, v), v) == text
    with pytest.raises(UnknownTokenError):
        tokenize("set dinner", v)
    assert tokenize("set dinner", v, WordPolicy(unknown="skip")) == [v.id("set")]


def test_bpe_matches_hand_trace():
    # corpus words: ab x2, abc x1  -> symbols a b </w>
    # pair counts: (a,b)=3 (b,</w>)=2 (b,c)=1 (c,</w>)=1      -> merge ab
    # then (ab,</w>)=2 (ab,c)=1 (c,</w>)=1                      -> merge ab</w>
    # then tie (ab,c)=1 vs (c,</w>)=1, smaller pair is (ab,c)  -> merge abc
    bpe = BpePolicy(num_merges=3)
    pieces = bpe.learn(["ab ab abc"])
    assert bpe.merges == [("a", "b"), ("ab", "</w>"), ("ab", "c")]
    assert set(pieces) == {"a", "b", "c", "</w>", "ab", "ab</w>", "abc"}
    assert bpe.split_word("abc") == ["abc", "</w>"]
    assert bpe.split_word("ab") == ["ab</w>"]
    v = build_vocab(["ab ab abc"], ["i"], ["s"], policy=bpe)
    ids = tokenize("abc ab", v, bpe)
    assert [v.symbol(i) for i in ids] == ["abc", "</w>", "ab</w>"]
    assert detokenize(ids, v, bpe) == "abc ab"


# ------------------------------------------------------------- SLURP jsonl
def _write(tmp_path, records):
    p = tmp_path / "ann.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return p


def test_table1_bio_tags(tmp_path, table1_vocab):
    v = table1_vocab
    (utt,) = load_slurp_jsonl(_write(tmp_path, [TABLE1]), v)
    assert [v.symbol(s) for s in utt.slots] == ["O", "B_meal_type", "B_general_frequency",
                                               "I_general_frequency", "O", "B_time", "I_time"]
    assert v.symbol(utt.intent) == "calendar_set"
    assert utterance_record(utt, v)["entities"] == TABLE1["entities"]


def test_no_entities_all_outside(tmp_path, table1_vocab):
    rec = {"id": "x", "transcript": "set lunch", "intent": "alarm_set", "entities": []}
    (utt,) = load_slurp_jsonl(_write(tmp_path, [rec]), table1_vocab)
    assert utt.slots == [table1_vocab.outside] * 2


def test_bad_records_rejected_with_diagnostic(tmp_path, table1_vocab):
    missing = {"id": "m", "transcript": "set lunch", "intent": "alarm_set",
               "entities": [{"type": "time", "filler": "twelve thirty"}]}
    overlap = {"id": "o", "transcript": "set lunch at twelve thirty", "intent": "alarm_set",
               "entities": [{"type": "time", "filler": "twelve thirty"}, {"type": "time", "filler": "thirty"}]}
    rejected = []
    utts = load_slurp_jsonl(_write(tmp_path, [missing, overlap, TABLE1]), table1_vocab, rejected=rejected)
    assert [u.id for u in utts] == ["t1"]
    assert [r[0] for r in rejected] == ["m", "o"]
    assert "contiguous" in rejected[0][1] and "overlaps" in rejected[1][1]


def test_unknown_names_raise(tmp_path, table1_vocab):
    with pytest.raises(KeyError):
        load_slurp_jsonl(_write(tmp_path, [dict(TABLE1, intent="nope")]), table1_vocab)
    with pytest.raises(KeyError):
        load_slurp_jsonl(_write(tmp_path, [dict(TABLE1, entities=[{"type": "nope", "filler": "lunch"}])]),
                         table1_vocab)


def test_multi_piece_words_b_then_i():
    bpe = BpePolicy(num_merges=2)
    v = build_vocab(["ab ab abc"], ["i"], ["s"], policy=bpe)
    from narslu.data.corpus import record_to_utterance
    utt = record_to_utterance({"id": "b", "transcript": "abc ab", "intent": "i",
                               "entities": [{"type": "s", "filler": "abc"}]}, v, bpe)
    assert [v.symbol(s) for s in utt.slots][:2] == ["B_s", "I_s"]


# ------------------------------------------------------------- masking
def test_mask_single_token(table1_vocab):
    v = table1_vocab
    seq, masked = mask_targets([7], np.random.default_rng(0), v)
    assert seq == [v.cls, v.mask] and masked == [0]


def test_mask_determinism(table1_vocab):
    a = mask_targets([5, 6, 7, 8, 9], np.random.default_rng(3), table1_vocab)
    b = mask_targets([5, 6, 7, 8, 9], np.random.default_rng(3), table1_vocab)
    assert a == b


def test_mask_count_uniform(table1_vocab):
    rng = np.random.default_rng(11)
    n_draws, n = 10_000, 4
    counts = np.zeros(n + 1)
    for _ in range(n_draws):
        seq, masked = mask_targets([5, 6, 7, 8], rng, table1_vocab)
        assert len(seq) == n + 1 and seq[0] == table1_vocab.cls
        assert all(seq[i + 1] == table1_vocab.mask for i in masked)
        counts[len(masked)] += 1
    expected = n_draws / n
    sigma = np.sqrt(n_draws * (1 / n) * (1 - 1 / n))
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] - expected) <= 3 * sigma)


# ------------------------------------------------------------- synthetic
def test_synth_degenerate_block_repetition():
    cfg = SynthConfig(noise=0.0, min_frames=6, max_frames=6, max_gap=0, n_utterances=5)
    world = SynthWorld.build(cfg)
    for u in world.generate(seed=1):
        assert u.features.shape[0] == 6 * len(u.tokens)
        for n, tok in enumerate(u.tokens):
            block = u.features[6 * n:6 * (n + 1)]
            assert np.array_equal(block, np.tile(world.codes[world.vocab.symbol(tok)], (6, 1)))


def test_synth_same_seed_identical():
    cfg = SynthConfig(n_utterances=30)
    a, va = synth_generate(cfg, seed=5)
    b, vb = synth_generate(cfg, seed=5)
    assert va.symbols == vb.symbols
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert (x.tokens, x.intent, x.slots) == (y.tokens, y.intent, y.slots)
    c, _ = synth_generate(cfg, seed=6)
    assert any(x.tokens != z.tokens for x, z in zip(a, c))


def test_synth_rejects_inconsistent_config():
    with pytest.raises(ValueError):
        SynthConfig(n_intents=0).validate()
    with pytest.raises(ValueError):
        SynthConfig(n_utterances=0).validate()
    with pytest.raises(ValueError):
        SynthConfig(vocab_size=12).validate()


def test_synth_nearest_neighbour_learnable():
    world = SynthWorld.build(SynthConfig(noise=0.1))
    utts = world.generate(seed=2, n=200)
    names = sorted(world.codes)
    codes = np.stack([np.zeros(world.config.feature_dim, np.float32)] + [world.codes[w] for w in names])
    ids = np.array([world.vocab.blank] + [world.vocab.id(w) for w in names])
    correct = total = 0
    for u in utts:
        d = ((u.features[:, None, :] - codes[None]) ** 2).sum(-1)
        pred = ids[d.argmin(1)]
        correct += int((pred == np.array(u.alignment)).sum())
        total += len(pred)
    assert correct / total >= 0.99


def test_synth_bio_well_formed():
    utts, v = synth_generate(SynthConfig(n_utterances=300), seed=3)
    for u in utts:
        prev = "O"
        for s in u.slots:
            name = v.symbol(s)
            if name.startswith("I_"):
                assert prev in (f"B_{name[2:]}", name)
            prev = name
        assert u.intent in v.intent_block
        assert all(s in v.slot_block for s in u.slots)
        assert all(a != b for a, b in zip(u.tokens, u.tokens[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_synth_is_pure_function_of_seed(seed):
    cfg = SynthConfig(n_utterances=3)
    a, _ = synth_generate(cfg, seed)
    b, _ = synth_generate(cfg, seed)
    assert [u.features.tobytes() for u in a] == [u.features.tobytes() for u in b]


# ------------------------------------------------------------- batching
def test_batches_cover_dataset_once():
    utts, v = synth_generate(SynthConfig(n_utterances=50), seed=0)
    batches = make_batches(utts, 16, seed=1, vocab=v)
    assert sum(len(b) for b in batches) == 50
    assert sorted(i for b in batches for i in b.ids) == sorted(u.id for u in utts)
    assert len(make_batches(utts, 64, seed=1, vocab=v)) == 1
    again = make_batches(utts, 16, seed=1, vocab=v)
    assert [b.ids for b in again] == [b.ids for b in batches]


def test_batch_masks_delimit_lengths():
    utts, v = synth_generate(SynthConfig(n_utterances=8), seed=0)
    b = collate(utts, v)
    for i, u in enumerate(utts):
        assert b.feature_mask[i].sum() == u.num_frames
        assert b.token_mask[i].sum() == len(u.tokens)
        assert np.all(b.tokens[i, len(u.tokens):] == v.pad)
        assert np.all(b.features[i, u.num_frames:] == 0)


# ------------------------------------------------------------- features
def test_feature_file_round_trip(tmp_path):
    m = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    write_features(tmp_path / "a.narf", m)
    raw = (tmp_path / "a.narf").read_bytes()
    assert raw[:4] == b"NARF"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3 and int.from_bytes(raw[12:16], "little") == 4
    np.testing.assert_array_equal(read_features(tmp_path / "a.narf"), m)
    with pytest.raises(ValueError):
        decode_features(b"XXXX" + encode_features(m)[4:])
    with pytest.raises(ValueError):
        decode_features(encode_features(m)[:-4])
