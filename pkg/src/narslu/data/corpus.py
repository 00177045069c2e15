"""Utterance records, SLURP-style annotation files and BIO tagging."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .tokenize import WordPolicy, normalise, tokenize_words
from .vocab import JointVocabulary

log = logging.getLogger(__name__)


class AnnotationError(ValueError):
    """A record cannot be turned into a consistent tagged utterance."""


@dataclass
class Utterance:
    id: str
    tokens: list[int]
    intent: int
    slots: list[int]
    text: str = ""
    features: Optional[np.ndarray] = None  # [T_raw, F]
    alignment: Optional[list[int]] = field(default=None, repr=False)  # frame token ids, synthetic only

    def __post_init__(self):
        if len(self.slots) != len(self.tokens):
            raise AnnotationError(f"{self.id}: {len(self.slots)} slot tags for {len(self.tokens)} tokens")

    @property
    def num_frames(self) -> int:
        return 0 if self.features is None else int(self.features.shape[0])


def find_spans(words: Sequence[str], entities: Sequence[dict], record_id: str = "?") -> list[tuple[int, int, str]]:
    """Locate each entity filler as a contiguous word span, in entity order.

    The first occurrence not overlapping an earlier entity is used.
    """
    taken = [False] * len(words)
    spans = []
    for ent in entities:
        filler = normalise(ent["filler"]).split()
        if not filler:
            raise AnnotationError(f"{record_id}: empty filler for slot {ent['type']!r}")
        n = len(filler)
        hits = [i for i in range(len(words) - n + 1) if list(words[i:i + n]) == filler]
        if not hits:
            raise AnnotationError(f"{record_id}: filler {ent['filler']!r} is not a contiguous span of the transcript")
        free = [i for i in hits if not any(taken[i:i + n])]
        if not free:
            raise AnnotationError(f"{record_id}: filler {ent['filler']!r} overlaps another entity span")
        start = free[0]
        for k in range(start, start + n):
            taken[k] = True
        spans.append((start, start + n, ent["type"]))
    return spans


def word_tags(n_words: int, spans: Iterable[tuple[int, int, str]]) -> list[tuple[str, Optional[str]]]:
    tags: list[tuple[str, Optional[str]]] = [("O", None)] * n_words
    for start, end, kind in spans:
        tags[start] = ("B", kind)
        for k in range(start + 1, end):
            tags[k] = ("I", kind)
    return tags


def tag_pieces(word_pieces: Sequence[Sequence[int]], tags: Sequence[tuple[str, Optional[str]]],
               vocab: JointVocabulary) -> list[int]:
    """Spread word tags over pieces: B on the first piece of a B word, I on the rest."""
    out = []
    for pieces, (prefix, kind) in zip(word_pieces, tags):
        for j, _ in enumerate(pieces):
            if prefix == "O":
                out.append(vocab.outside)
            else:
                out.append(vocab.slot_tag_id("B" if prefix == "B" and j == 0 else "I", kind))
    return out


def record_to_utterance(record: dict, vocab: JointVocabulary, policy=None) -> Utterance:
    policy = policy or WordPolicy()
    rid = str(record.get("id", "?"))
    text = normalise(record["transcript"])
    intent = vocab.intent_id(record["intent"])
    entities = record.get("entities") or []
    for ent in entities:
        if ent["type"] not in vocab.slot_types:
            raise KeyError(f"{rid}: unknown slot type {ent['type']!r}")
    words = text.split()
    spans = find_spans(words, entities, rid)
    pieces = tokenize_words(text, vocab, policy)
    if len(pieces) != len(words):
        raise AnnotationError(f"{rid}: some words were dropped during tokenisation")
    tokens = [i for p in pieces for i in p]
    slots = tag_pieces(pieces, word_tags(len(words), spans), vocab)
    return Utterance(id=rid, tokens=tokens, intent=intent, slots=slots, text=text)


def load_slurp_jsonl(path: Union[str, Path], vocab: JointVocabulary, policy=None,
                     rejected: Optional[list] = None) -> list[Utterance]:
    """Read annotation records; inconsistent records are skipped and reported.

    Unknown intent or slot names raise ``KeyError``: they indicate a
    vocabulary/corpus mismatch rather than a bad record.
    """
    utts = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            record = json.loads(line)
            try:
                utts.append(record_to_utterance(record, vocab, policy))
            except AnnotationError as exc:
                log.warning("rejected record at %s:%d: %s", path, line_no, exc)
                if rejected is not None:
                    rejected.append((record.get("id"), str(exc)))
    return sorted(utts, key=lambda u: u.id)


def utterance_record(utt: Utterance, vocab: JointVocabulary) -> dict:
    """Annotation record (id, transcript, intent, entities) for an utterance."""
    from ..metrics import extract_entities

    words = [vocab.symbol(t) for t in utt.tokens]
    tags = [vocab.symbol(s) for s in utt.slots]
    return {"id": utt.id, "transcript": " ".join(words), "intent": vocab.symbol(utt.intent),
            "entities": [{"type": k, "filler": f} for k, f in extract_entities(words, tags)]}


def write_jsonl(path: Union[str, Path], records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
