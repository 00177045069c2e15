"""Padding, length-bucketed batching and CMLM target masking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Utterance
from .vocab import JointVocabulary


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # [B, T_max, F], zero padded
    feature_lengths: np.ndarray  # [B]
    tokens: np.ndarray  # [B, N_max], PAD padded
    token_lengths: np.ndarray  # [B]
    intents: np.ndarray  # [B]
    slots: np.ndarray  # [B, N_max], PAD padded

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def feature_mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.feature_lengths[:, None]

    @property
    def token_mask(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.token_lengths[:, None]

    def token_lists(self) -> list[list[int]]:
        return [list(map(int, row[:n])) for row, n in zip(self.tokens, self.token_lengths)]

    def slot_lists(self) -> list[list[int]]:
        return [list(map(int, row[:n])) for row, n in zip(self.slots, self.token_lengths)]


def collate(utts: Sequence[Utterance], vocab: JointVocabulary) -> Batch:
    if not utts:
        raise ValueError("cannot collate an empty batch")
    feat_dim = utts[0].features.shape[1]
    t_max = max(u.num_frames for u in utts)
    n_max = max(1, max(len(u.tokens) for u in utts))
    feats = np.zeros((len(utts), t_max, feat_dim), dtype=np.float32)
    tokens = np.full((len(utts), n_max), vocab.pad, dtype=np.int64)
    slots = np.full((len(utts), n_max), vocab.pad, dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, :u.num_frames] = u.features
        tokens[i, :len(u.tokens)] = u.tokens
        slots[i, :len(u.slots)] = u.slots
    return Batch(
        ids=[u.id for u in utts],
        features=feats,
        feature_lengths=np.array([u.num_frames for u in utts], dtype=np.int64),
        tokens=tokens,
        token_lengths=np.array([len(u.tokens) for u in utts], dtype=np.int64),
        intents=np.array([u.intent for u in utts], dtype=np.int64),
        slots=slots,
    )


def make_batches(dataset: Sequence[Utterance], batch_size: int, seed: int,
                 vocab: JointVocabulary) -> list[Batch]:
    """Length-bucketed, seeded shuffling; every utterance appears once."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    # stable sort keeps the random order among equal lengths
    order = order[np.argsort([dataset[i].num_frames for i in order], kind="stable")]
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    groups = [groups[i] for i in rng.permutation(len(groups))]
    return [collate([dataset[i] for i in g], vocab) for g in groups]


def mask_targets(transcript: Sequence[int], rng: np.random.Generator,
                 vocab: JointVocabulary) -> tuple[list[int], list[int]]:
    """Mask a uniformly drawn number (1..N) of positions, without replacement.

    Returns the CLS-prefixed decoder input (length N+1) and the sorted masked
    indices into ``transcript`` (decoder position = index + 1).
    """
    n = len(transcript)
    if n < 1:
        raise ValueError("cannot mask an empty transcript")
    count = int(rng.integers(1, n + 1))
    masked = sorted(int(i) for i in rng.choice(n, size=count, replace=False))
    seq = list(transcript)
    for i in masked:
        seq[i] = vocab.mask
    return [vocab.cls] + seq, masked
