import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narslu.metrics import (EvalReport, edit_ops, evaluate, extract_entities, ic_accuracy, levenshtein, rtf,
                            slu_f1, wer)

TABLE1_WORDS = "set lunch every day at twelve thirty".split()
TABLE1_TAGS = ["O", "B_meal_type", "B_general_frequency", "I_general_frequency", "O", "B_time", "I_time"]


def test_wer_examples():
    assert wer("a b c".split(), "a b c".split())[0] == 0.0
    pct, s, i, d = wer("a b c".split(), "a x c d".split())
    assert (s, i, d) == (1, 1, 0)
    assert pct == pytest.approx(200 / 3)
    assert round(pct, 2) == 66.67
    assert wer("a b c".split(), []) == (100.0, 0, 0, 3)
    assert wer([], ["a", "b"])[0] == 200.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=8), st.lists(st.integers(0, 5), max_size=8),
       st.permutations(list(range(6))))
def test_wer_invariant_under_relabelling(ref, hyp, perm):
    relabel = dict(enumerate(perm))
    a = wer(ref, hyp)
    b = wer([relabel[x] for x in ref], [relabel[x] for x in hyp])
    assert a[0] == b[0]
    assert sum(a[1:]) == levenshtein(ref, hyp)


def test_ic_accuracy():
    assert ic_accuracy([("a", "a"), ("b", "b")]) == 100.0
    assert ic_accuracy([("a", "b")]) == 0.0
    assert ic_accuracy([("a", "a"), ("b", "b"), ("c", "c"), ("d", "x")]) == 75.0
    with pytest.raises(ValueError):
        ic_accuracy([])


def test_extract_entities_table1():
    assert extract_entities(TABLE1_WORDS, TABLE1_TAGS) == [
        ("meal_type", "lunch"), ("general_frequency", "every day"), ("time", "twelve thirty")]
    assert extract_entities(["a", "b"], ["O", "O"]) == []


def test_extract_entities_orphan_inside_tag():
    tags = ["O", "O", "O", "O", "O", "O", "I_time"]
    assert extract_entities(TABLE1_WORDS, tags) == [("time", "thirty")]
    assert extract_entities(["x", "y"], ["B_a", "I_b"]) == [("a", "x"), ("b", "y")]


def test_slu_f1_perfect_and_empty():
    gold = [[("time", "twelve thirty")], [("meal_type", "lunch")]]
    assert slu_f1(gold, gold)[:3] == (100.0, 100.0, 100.0)
    f1, wf1, cf1, counts = slu_f1(gold, [[], []])
    assert (f1, wf1, cf1) == (0.0, 0.0, 0.0)
    assert counts["word"] == {"tp": 0.0, "fp": 0.0, "fn": 2.0}


def test_slu_f1_partial_match_hand_trace():
    # words: "twelve thirty" vs "twelve thirteen": 1 substitution / 2 words -> d_w = 0.5
    # chars: "thirty" -> "thirteen" = y->e, +e, +n = 3 edits over max(13, 15) chars -> d_c = 0.2
    f1, wf1, cf1, counts = slu_f1([[("time", "twelve thirty")]], [[("time", "twelve thirteen")]])
    assert counts["word"] == {"tp": 0.5, "fp": 0.5, "fn": 0.5}
    assert wf1 == pytest.approx(50.0)
    assert counts["char"]["tp"] == pytest.approx(0.8)
    assert cf1 == pytest.approx(80.0)
    # combined: tp 1.3, fp 0.7, fn 0.7 -> 2.6 / 4.0
    assert f1 == pytest.approx(65.0)


def test_slu_f1_type_mismatch_counts_fp_and_fn():
    f1, _, _, counts = slu_f1([[("time", "noon")]], [[("date", "noon")]])
    assert f1 == 0.0
    assert counts["word"] == {"tp": 0.0, "fp": 1.0, "fn": 1.0}


entity = st.tuples(st.sampled_from(["a", "b"]), st.sampled_from(["x", "x y", "z", "y z w"]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(entity, max_size=3), st.lists(entity, max_size=3)), min_size=1, max_size=4))
def test_slu_f1_bounds_and_exactness(utts):
    gold = [g for g, _ in utts]
    pred = [p for _, p in utts]
    f1, wf1, cf1, _ = slu_f1(gold, pred)
    for v in (f1, wf1, cf1):
        assert 0.0 <= v <= 100.0
    exact = all(sorted(g) == sorted(p) for g, p in utts)
    assert (f1 == pytest.approx(100.0)) == exact or not exact and f1 < 100.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(entity, max_size=3), st.lists(entity, max_size=3)), min_size=1, max_size=4),
       entity)
def test_slu_f1_monotone_in_correct_entities(utts, extra):
    gold = [g for g, _ in utts]
    pred = [p for _, p in utts]
    before = slu_f1(gold, pred)[0]
    after = slu_f1(gold + [[extra]], pred + [[extra]])[0]
    assert after >= before - 1e-9


def test_rtf():
    assert rtf(5.0, 50.0) == pytest.approx(0.1)
    assert rtf(10.0, 50.0) == pytest.approx(2 * rtf(5.0, 50.0))
    with pytest.raises(ValueError):
        rtf(1.0, 0.0)


def test_evaluate_identity_and_report_invariants():
    refs = [{"id": "1", "transcript": " ".join(TABLE1_WORDS), "intent": "calendar_set",
             "entities": [{"type": "time", "filler": "twelve thirty"}]},
            {"id": "2", "transcript": "a b c", "intent": "x", "entities": []}]
    rep = evaluate(refs, refs)
    assert (rep.wer, rep.ic_acc, rep.slu_f1) == (0.0, 100.0, 100.0)
    hyps = [dict(refs[0], transcript="set lunch"), {"transcript": "a x c d", "intent": "y", "slots": ["O"] * 4,
                                                    "iterations": 3}]
    rep = evaluate(refs, hyps, wall_seconds=1.0, audio_secs=10.0)
    c = rep.counts
    assert rep.wer == pytest.approx(100.0 * (c["substitutions"] + c["insertions"] + c["deletions"]) / 10)
    assert rep.rtf == pytest.approx(0.1)
    assert rep.avg_iterations == 3
    assert "WER\tIC_Acc" in rep.table()
    assert isinstance(EvalReport(**{**rep.__dict__}).to_json(), str)


def test_edit_ops_counts_sum_to_distance():
    assert edit_ops("kitten", "sitting") == (2, 1, 0)
