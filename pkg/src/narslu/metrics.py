"""Evaluation metrics: WER, intent accuracy, SLU-F1, real-time factor.

SLU-F1 here is a fully specified variant of the edit-distance-penalised
slot F1: per utterance and slot type, predicted and gold entities are paired
greedily by smallest character edit distance. A pair with normalised word
distance d_w adds (1 - d_w) to word-level TP and d_w to both FP and FN; the
character level is analogous. Unpaired predictions count one FP, unpaired
gold entities one FN, at both levels. SLU-F1 is the F1 of the summed word
and character counts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Optional, Sequence


def edit_ops(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-cost unit alignment."""
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i][j] = min(sub, dist[i - 1][j] + 1, dist[i][j - 1] + 1)
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, ins, dele


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    return sum(edit_ops(a, b))


def wer(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> tuple[float, int, int, int]:
    """Word error rate in percent with its S, I, D counts.

    An empty reference yields 100 * len(hyp) (every hypothesis word is an insertion).
    """
    s, i, d = edit_ops(ref, hyp)
    denom = len(ref) if ref else 1
    return 100.0 * (s + i + d) / denom, s, i, d


def ic_accuracy(pairs: Iterable[tuple[Hashable, Hashable]]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("intent accuracy needs at least one utterance")
    return 100.0 * sum(g == p for g, p in pairs) / len(pairs)


def extract_entities(tokens: Sequence[str], tags: Sequence[str]) -> list[tuple[str, str]]:
    """BIO spans -> [(slot type, filler)].

    An I_ tag not continuing a span of the same type opens a new entity.
    """
    if len(tokens) != len(tags):
        raise ValueError(f"{len(tokens)} tokens but {len(tags)} tags")
    entities: list[tuple[str, list[str]]] = []
    current: Optional[str] = None
    for tok, tag in zip(tokens, tags):
        if tag.startswith("B_") or (tag.startswith("I_") and tag[2:] != current):
            current = tag[2:]
            entities.append((current, [tok]))
        elif tag.startswith("I_"):
            entities[-1][1].append(tok)
        else:
            current = None
    return [(kind, " ".join(words)) for kind, words in entities]


@dataclass
class F1Counts:
    tp: float = 0.0
    fp: float = 0.0
    fn: float = 0.0

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 100.0 if denom == 0 else 100.0 * 2 * self.tp / denom

    def __add__(self, other: "F1Counts") -> "F1Counts":
        return F1Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def _distance_fraction(a: Sequence, b: Sequence) -> float:
    longest = max(len(a), len(b))
    return 0.0 if longest == 0 else min(1.0, max(0.0, levenshtein(a, b) / longest))


def slu_f1(gold: Sequence[Sequence[tuple[str, str]]],
           pred: Sequence[Sequence[tuple[str, str]]]) -> tuple[float, float, float, dict]:
    """(slu_f1, word_f1, char_f1, counts) over a corpus of per-utterance entity lists."""
    if len(gold) != len(pred):
        raise ValueError("gold and predicted entity lists differ in length")
    word, char = F1Counts(), F1Counts()
    for g_ents, p_ents in zip(gold, pred):
        for kind in sorted({k for k, _ in g_ents} | {k for k, _ in p_ents}):
            g = [f for k, f in g_ents if k == kind]
            p = [f for k, f in p_ents if k == kind]
            cand = sorted((levenshtein(gf, pf), gi, pi) for gi, gf in enumerate(g) for pi, pf in enumerate(p))
            used_g, used_p = set(), set()
            for _, gi, pi in cand:
                if gi in used_g or pi in used_p:
                    continue
                used_g.add(gi)
                used_p.add(pi)
                dw = _distance_fraction(g[gi].split(), p[pi].split())
                dc = _distance_fraction(g[gi], p[pi])
                word += F1Counts(1.0 - dw, dw, dw)
                char += F1Counts(1.0 - dc, dc, dc)
            unmatched = F1Counts(0.0, len(p) - len(used_p), len(g) - len(used_g))
            word += unmatched
            char += unmatched
    total = word + char
    counts = {"word": asdict(word), "char": asdict(char)}
    return total.f1(), word.f1(), char.f1(), counts


def rtf(decode_seconds: float, audio_seconds: float) -> float:
    if audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    return decode_seconds / audio_seconds


FRAME_SECONDS = 0.01


def audio_seconds(num_frames: int) -> float:
    """Synthetic audio duration: one feature frame per 10 ms."""
    return num_frames * FRAME_SECONDS


@dataclass
class EvalReport:
    wer: float
    ic_acc: float
    slu_f1: float
    word_f1: float
    char_f1: float
    rtf: Optional[float] = None
    avg_iterations: Optional[float] = None
    num_utterances: int = 0
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        """Tab-delimited header + row mirroring WER / IC Acc / SLU-F1 / RTF."""
        cols = ["WER", "IC_Acc", "SLU-F1", "word-F1", "char-F1", "RTF", "avg_iter"]
        vals = [self.wer, self.ic_acc, self.slu_f1, self.word_f1, self.char_f1, self.rtf, self.avg_iterations]
        cells = ["-" if v is None else f"{v:.2f}" if k != "RTF" else f"{v:.4f}" for k, v in zip(cols, vals)]
        return "\t".join(cols) + "\n" + "\t".join(cells)


def evaluate(references: Sequence[dict], hypotheses: Sequence[dict], wall_seconds: Optional[float] = None,
             audio_secs: Optional[float] = None) -> EvalReport:
    """Aggregate metrics over id-aligned reference/hypothesis records.

    Records carry ``transcript`` (str), ``intent`` (str) and either
    ``entities`` (list of {type, filler}) or ``slots`` (list of tag names).
    """
    s = i = d = n_ref = 0
    intents, gold_ents, pred_ents, iters = [], [], [], []
    for ref, hyp in zip(references, hypotheses):
        r_words, h_words = ref["transcript"].split(), hyp["transcript"].split()
        _, ds, di, dd = wer(r_words, h_words)
        s, i, d, n_ref = s + ds, i + di, d + dd, n_ref + len(r_words)
        intents.append((ref["intent"], hyp["intent"]))
        gold_ents.append(_entities(ref))
        pred_ents.append(_entities(hyp))
        if hyp.get("iterations") is not None:
            iters.append(hyp["iterations"])
    f1, wf1, cf1, counts = slu_f1(gold_ents, pred_ents)
    counts.update({"substitutions": s, "insertions": i, "deletions": d, "reference_words": n_ref})
    return EvalReport(
        wer=100.0 * (s + i + d) / max(n_ref, 1),
        ic_acc=ic_accuracy(intents),
        slu_f1=f1, word_f1=wf1, char_f1=cf1,
        rtf=None if wall_seconds is None or not audio_secs else rtf(wall_seconds, audio_secs),
        avg_iterations=sum(iters) / len(iters) if iters else None,
        num_utterances=len(intents),
        counts=counts,
    )


def _entities(record: dict) -> list[tuple[str, str]]:
    if "entities" in record:
        return [(e["type"], e["filler"]) for e in record["entities"]]
    return extract_entities(record["transcript"].split(), record["slots"])
