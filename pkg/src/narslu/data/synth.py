"""Synthetic joint ASR/SLU task that trains in minutes.

Each word owns a fixed random code vector; an utterance's features are the
codes of its words, each held for a random number of frames, separated by
short silences and perturbed by Gaussian noise. A keyword placed anywhere in
the utterance fixes the intent. Slot fillers are drawn from a value pool
shared by all slot types; the slot type is signalled only by the trigger
word in front of the filler, so tagging needs left context.

The inventory (words, codes, grammar) depends only on ``world_seed``; the
utterances drawn depend on the ``seed`` passed to :func:`synth_generate`, so
train/dev/test splits share one world.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .corpus import Utterance
from .vocab import JointVocabulary

_INTENT_NAMES = ["alarm_set", "calendar_set", "play_music", "weather_query", "email_send",
                 "lists_add", "iot_lights_on", "news_query", "transport_ticket", "cooking_recipe"]
_SLOT_NAMES = ["time", "date", "place_name", "person", "meal_type", "device_type",
               "event_name", "general_frequency"]
_ONSETS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SynthConfig:
    n_intents: int = 6
    n_slot_types: int = 4
    vocab_size: int = 40
    n_values: int = 8
    min_words: int = 4
    max_words: int = 8
    min_frames: int = 8
    max_frames: int = 12
    max_gap: int = 3
    feature_dim: int = 16
    noise: float = 0.1
    n_utterances: int = 2000
    world_seed: int = 0

    def validate(self) -> None:
        if self.n_intents < 1 or self.n_slot_types < 1:
            raise ValueError("need at least one intent and one slot type")
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be positive")
        if self.n_values < 2:
            raise ValueError("n_values must be at least 2")
        n_carriers = self.vocab_size - self.n_intents - self.n_slot_types - self.n_values
        if n_carriers < 2:
            raise ValueError(f"vocab_size {self.vocab_size} leaves {n_carriers} carrier words (need >= 2)")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("word-count range is empty")
        if not 4 <= self.min_frames <= self.max_frames:
            raise ValueError("frames per word must be at least 4 (front-end subsamples by 4)")
        if self.max_gap < 0 or self.noise < 0 or self.feature_dim < 1:
            raise ValueError("max_gap, noise must be >= 0 and feature_dim >= 1")
        if self.n_intents > len(_INTENT_NAMES) * 10 or self.n_slot_types > len(_SLOT_NAMES) * 10:
            raise ValueError("too many intents or slot types for the name pool")

    def to_dict(self) -> dict:
        return asdict(self)


def _names(pool: list[str], n: int) -> list[str]:
    return [pool[i % len(pool)] + ("" if i < len(pool) else f"_{i // len(pool)}") for i in range(n)]


def _words(n: int) -> list[str]:
    out = []
    for c1 in _ONSETS:
        for v1 in _VOWELS:
            for c2 in _ONSETS:
                for v2 in _VOWELS:
                    out.append(c1 + v1 + c2 + v2)
    rng = np.random.default_rng(12345)
    picked = rng.choice(len(out), size=n, replace=False)
    return [out[i] for i in sorted(picked)]


@dataclass
class SynthWorld:
    config: SynthConfig
    vocab: JointVocabulary
    keywords: list[str]  # index = intent
    triggers: list[str]  # index = slot type
    values: list[str]
    carriers: list[str]
    codes: dict[str, np.ndarray]

    @classmethod
    def build(cls, config: SynthConfig) -> "SynthWorld":
        config.validate()
        words = _words(config.vocab_size)
        rng = np.random.default_rng(config.world_seed)
        words = [words[i] for i in rng.permutation(len(words))]
        k, s, v = config.n_intents, config.n_slot_types, config.n_values
        keywords, triggers, values, carriers = words[:k], words[k:k + s], words[k + s:k + s + v], words[k + s + v:]
        intents = _names(_INTENT_NAMES, k)
        slot_types = _names(_SLOT_NAMES, s)
        vocab = JointVocabulary(list(words), intents, slot_types)
        codes = {w: rng.normal(size=config.feature_dim).astype(np.float32) for w in sorted(words)}
        return cls(config, vocab, keywords, triggers, values, carriers, codes)

    @property
    def intent_names(self) -> list[str]:
        return _names(_INTENT_NAMES, self.config.n_intents)

    @property
    def slot_type_names(self) -> list[str]:
        return _names(_SLOT_NAMES, self.config.n_slot_types)

    def _sentence(self, rng: np.random.Generator) -> tuple[list[str], list[str], str]:
        cfg = self.config
        intent = int(rng.integers(cfg.n_intents))
        segments: list[tuple[list[str], list[str]]] = [([self.keywords[intent]], ["O"])]
        n_slots = int(rng.integers(0, min(2, cfg.n_slot_types) + 1))
        for st in rng.choice(cfg.n_slot_types, size=n_slots, replace=False):
            kind = self.slot_type_names[st]
            n_fill = int(rng.integers(1, 3))
            fill = [self.values[int(i)] for i in rng.choice(len(self.values), size=n_fill, replace=False)]
            segments.append(([self.triggers[st]] + fill, ["O", f"B_{kind}"] + [f"I_{kind}"] * (n_fill - 1)))
        target = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        used = sum(len(w) for w, _ in segments)
        for _ in range(max(0, target - used)):
            segments.append(([self.carriers[int(rng.integers(len(self.carriers)))]], ["O"]))
        while True:
            order = rng.permutation(len(segments))
            words = [w for i in order for w in segments[i][0]]
            if all(a != b for a, b in zip(words, words[1:])):
                tags = [t for i in order for t in segments[i][1]]
                return words, tags, self.intent_names[intent]
            # adjacent duplicates only come from carriers; redraw them
            segments = [seg if len(seg[0]) > 1 or seg[0][0] not in self.carriers
                        else ([self.carriers[int(rng.integers(len(self.carriers)))]], ["O"])
                        for seg in segments]

    def _render(self, words: list[str], rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
        cfg = self.config
        frames: list[np.ndarray] = []
        labels: list[int] = []
        silence = np.zeros(cfg.feature_dim, dtype=np.float32)

        def gap():
            n = int(rng.integers(0, cfg.max_gap + 1))
            frames.extend([silence] * n)
            labels.extend([self.vocab.blank] * n)

        gap()
        for w in words:
            n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
            frames.extend([self.codes[w]] * n)
            labels.extend([self.vocab.id(w)] * n)
            gap()
        feats = np.stack(frames).astype(np.float32)
        if cfg.noise > 0:
            feats = feats + rng.normal(0.0, cfg.noise, size=feats.shape).astype(np.float32)
        return feats, labels

    def generate(self, seed: int, n: Optional[int] = None, prefix: str = "utt") -> list[Utterance]:
        rng = np.random.default_rng(seed)
        utts = []
        for i in range(self.config.n_utterances if n is None else n):
            words, tags, intent = self._sentence(rng)
            feats, labels = self._render(words, rng)
            utts.append(Utterance(
                id=f"{prefix}{i:05d}",
                tokens=[self.vocab.id(w) for w in words],
                intent=self.vocab.intent_id(intent),
                slots=[self.vocab.id(t) for t in tags],
                text=" ".join(words),
                features=feats,
                alignment=labels,
            ))
        return utts


def synth_generate(config: SynthConfig, seed: int, prefix: str = "utt") -> tuple[list[Utterance], JointVocabulary]:
    """Deterministic dataset for (config, seed)."""
    world = SynthWorld.build(config)
    return world.generate(seed, prefix=prefix), world.vocab
