"""Word-level and byte-pair tokenisation policies."""

from __future__ import annotations

from collections import Counter
from typing import Optional, Sequence

END = "</w>"


def normalise(text: str) -> str:
    return " ".join(text.lower().split())


class UnknownTokenError(KeyError):
    pass


class WordPolicy:
    """Each whitespace-separated word is one piece.

    ``unknown`` selects what happens to out-of-vocabulary words: ``"error"``
    raises, ``"skip"`` drops them.
    """

    name = "word"

    def __init__(self, unknown: str = "error"):
        if unknown not in ("error", "skip"):
            raise ValueError(f"unknown-word handling must be 'error' or 'skip', got {unknown!r}")
        self.unknown = unknown

    def learn(self, transcripts: Sequence[str]) -> list[str]:
        return sorted({w for t in transcripts for w in normalise(t).split()})

    def split_word(self, word: str) -> list[str]:
        return [word]

    def join(self, pieces: Sequence[str]) -> str:
        return " ".join(pieces)


class BpePolicy:
    """Greedy pair-merge BPE with an end-of-word marker.

    Training repeatedly merges the most frequent adjacent symbol pair; ties go
    to the lexicographically smallest pair. Encoding replays the merges in
    learned order.
    """

    name = "bpe"

    def __init__(self, num_merges: int = 100, merges: Optional[list[tuple[str, str]]] = None,
                 unknown: str = "error"):
        self.num_merges = num_merges
        self.merges: list[tuple[str, str]] = list(merges or [])
        self.unknown = unknown

    def learn(self, transcripts: Sequence[str]) -> list[str]:
        words = Counter(w for t in transcripts for w in normalise(t).split())
        corpus = {tuple(w) + (END,): c for w, c in words.items()}
        symbols = {s for seq in corpus for s in seq}
        self.merges = []
        for _ in range(self.num_merges):
            pairs: Counter = Counter()
            for seq, c in corpus.items():
                for a, b in zip(seq, seq[1:]):
                    pairs[(a, b)] += c
            if not pairs:
                break
            best_count = max(pairs.values())
            best = min(p for p, c in pairs.items() if c == best_count)
            self.merges.append(best)
            merged = best[0] + best[1]
            symbols.add(merged)
            corpus = {self._merge(seq, best, merged): c for seq, c in corpus.items()}
        return sorted(symbols)

    @staticmethod
    def _merge(seq: tuple, pair: tuple[str, str], merged: str) -> tuple:
        out = []
        i = 0
        while i < len(seq):
            if i + 1 < len(seq) and (seq[i], seq[i + 1]) == pair:
                out.append(merged)
                i += 2
            else:
                out.append(seq[i])
                i += 1
        return tuple(out)

    def split_word(self, word: str) -> list[str]:
        seq = tuple(word) + (END,)
        for pair in self.merges:
            seq = self._merge(seq, pair, pair[0] + pair[1])
        return list(seq)

    def join(self, pieces: Sequence[str]) -> str:
        return "".join(pieces).replace(END, " ").strip()


def tokenize_words(text: str, vocab, policy=None) -> list[list[int]]:
    """Per-word piece ids (needed for word-aligned slot tagging)."""
    policy = policy or WordPolicy()
    out = []
    for word in normalise(text).split():
        ids = []
        for piece in policy.split_word(word):
            if piece in vocab and vocab.id(piece) in vocab.asr_block:
                ids.append(vocab.id(piece))
            elif policy.unknown == "error":
                raise UnknownTokenError(f"piece {piece!r} of word {word!r} is not in the vocabulary")
        if ids:
            out.append(ids)
    return out


def tokenize(text: str, vocab, policy=None) -> list[int]:
    return [i for word in tokenize_words(text, vocab, policy) for i in word]


def detokenize(ids: Sequence[int], vocab, policy=None) -> str:
    policy = policy or WordPolicy()
    return policy.join([vocab.symbol(i) for i in ids])
