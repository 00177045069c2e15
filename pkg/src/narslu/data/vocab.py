"""Joint vocabulary: special symbols, ASR pieces, intents and BIO slot tags share one id space."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

BLANK, MASK, CLS, PAD, EOS = "<blank>", "<mask>", "<cls>", "<pad>", "<eos>"
SPECIALS = (BLANK, MASK, CLS, PAD, EOS)
OUTSIDE = "O"


def slot_tag_names(slot_types: Iterable[str]) -> list[str]:
    names = [OUTSIDE]
    for t in sorted(slot_types):
        names += [f"B_{t}", f"I_{t}"]
    return names


@dataclass
class JointVocabulary:
    """Id layout: specials, then ASR pieces, intents, slot tags (each block sorted)."""

    pieces: list[str]
    intents: list[str]
    slot_types: list[str]
    symbols: list[str] = field(init=False)
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.pieces = sorted(self.pieces)
        self.intents = sorted(self.intents)
        self.slot_types = sorted(self.slot_types)
        self.symbols = list(SPECIALS) + self.pieces + self.intents + slot_tag_names(self.slot_types)
        self._index = {}
        for i, s in enumerate(self.symbols):
            if s in self._index:
                raise ValueError(f"duplicate vocabulary entry {s!r}")
            self._index[s] = i

    # -- sizes and blocks -------------------------------------------------
    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def asr_block(self) -> range:
        start = len(SPECIALS)
        return range(start, start + len(self.pieces))

    @property
    def intent_block(self) -> range:
        start = self.asr_block.stop
        return range(start, start + len(self.intents))

    @property
    def slot_block(self) -> range:
        start = self.intent_block.stop
        return range(start, start + 2 * len(self.slot_types) + 1)

    @property
    def blank(self) -> int:
        return 0

    @property
    def mask(self) -> int:
        return 1

    @property
    def cls(self) -> int:
        return 2

    @property
    def pad(self) -> int:
        return 3

    @property
    def eos(self) -> int:
        return 4

    @property
    def outside(self) -> int:
        return self.slot_block.start

    # -- lookup -----------------------------------------------------------
    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"unknown symbol {symbol!r}") from None

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def symbol(self, idx: int) -> str:
        return self.symbols[idx]

    def intent_id(self, name: str) -> int:
        if name not in self.intents:
            raise KeyError(f"unknown intent {name!r}")
        return self._index[name]

    def slot_tag_id(self, prefix: str, slot_type: str) -> int:
        if slot_type not in self.slot_types:
            raise KeyError(f"unknown slot type {slot_type!r}")
        return self._index[f"{prefix}_{slot_type}"]

    def decode_tag(self, idx: int) -> tuple[str, str | None]:
        """Slot-tag id -> ('B'|'I'|'O', slot type or None)."""
        name = self.symbols[idx]
        if name == OUTSIDE:
            return "O", None
        return name[0], name[2:]

    # -- persistence -------------------------------------------------------
    def to_json(self) -> dict:
        return {"pieces": self.pieces, "intents": self.intents, "slot_types": self.slot_types}

    @classmethod
    def from_json(cls, obj: dict) -> "JointVocabulary":
        return cls(list(obj["pieces"]), list(obj["intents"]), list(obj["slot_types"]))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "JointVocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocab(transcripts: Iterable[str], intents: Sequence[str], slot_types: Sequence[str],
                policy=None) -> JointVocabulary:
    """Assign ids from the actual inventories; |V| is never fixed in advance.

    ``policy`` is a tokenisation policy exposing ``learn(transcripts) -> pieces``
    (defaults to word-level).
    """
    from .tokenize import WordPolicy

    intents, slot_types = list(intents), list(slot_types)
    if not intents or not slot_types:
        raise ValueError("intent and slot-type inventories must be non-empty")
    for kind, names in (("intent", intents), ("slot type", slot_types)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate {kind} names: {dupes}")
    policy = policy or WordPolicy()
    pieces = policy.learn(list(transcripts))
    if not pieces:
        raise ValueError("no ASR pieces found in the transcripts")
    return JointVocabulary(pieces, intents, slot_types)
