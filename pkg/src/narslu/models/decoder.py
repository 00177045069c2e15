"""Transformer decoders: the bidirectional CMLM and the causal AR decoder.

Both heads of both decoders score the full joint vocabulary; consumers
restrict to the relevant block (ASR pieces, intents, slot tags) with
:func:`block_log_softmax`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..data.vocab import JointVocabulary
from ..numerics import functional as F
from ..numerics.nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, causal_mask, \
    padding_mask
from ..numerics.tensor import ShapeError, Tensor
from .config import DecoderConfig


def block_log_softmax(logits: Tensor, block) -> Tensor:
    """Log-softmax over a subset of the last axis (a range or an index array)."""
    if isinstance(block, range) and block.step == 1:
        sub = F.getitem(logits, (Ellipsis, slice(block.start, block.stop)))
    else:
        sub = F.getitem(logits, (Ellipsis, np.asarray(block)))
    return F.log_softmax(sub, axis=-1)


def embed_block(block_probs: np.ndarray, block, vocab_size: int) -> np.ndarray:
    """Place block-restricted probabilities back at their |V| indices (zeros elsewhere)."""
    out = np.zeros(block_probs.shape[:-1] + (vocab_size,), dtype=block_probs.dtype)
    out[..., np.asarray(block)] = block_probs
    return out


class DecoderLayer(Module):
    """Pre-norm self-attention, cross-attention, feed-forward."""

    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig):
        d = cfg.d_model
        self.self_norm = LayerNorm(d)
        self.self_att = MultiHeadAttention(rng, d, cfg.heads, cfg.dropout)
        self.src_norm = LayerNorm(d)
        self.src_att = MultiHeadAttention(rng, d, cfg.heads, cfg.dropout)
        self.ff_norm = LayerNorm(d)
        self.ff = FeedForward(rng, d, cfg.ff_dim, "relu", cfg.dropout)

    def __call__(self, x: Tensor, self_mask, memory: Tensor, memory_mask, rng=None,
                 history: Optional[Tensor] = None) -> Tensor:
        """``history``: layer inputs of all positions visible to ``x`` (incremental decoding)."""
        h = self.self_norm(x)
        kv = h if history is None else self.self_norm(history)
        x = x + self.self_att(h, kv, self_mask, rng)
        x = x + self.src_att(self.src_norm(x), memory, memory_mask, rng)
        return x + self.ff(self.ff_norm(x), rng)


class _Trunk(Module):
    def __init__(self, rng: np.random.Generator, cfg: DecoderConfig):
        cfg.validate()
        self.cfg = cfg
        self.embed = Embedding(rng, cfg.vocab_size, cfg.d_model)
        self.pos = Embedding(rng, cfg.max_tokens, cfg.d_model)
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.d_model)
        self.asr_head = Linear(rng, cfg.d_model, cfg.vocab_size)
        self.slu_head = Linear(rng, cfg.d_model, cfg.vocab_size)

    def _inputs(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"decoder ids must be [B, L], got {ids.shape}")
        length = ids.shape[1]
        if offset + length > self.cfg.max_tokens:
            raise ShapeError(f"sequence of {offset + length} exceeds decoder positions ({self.cfg.max_tokens})")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ShapeError("decoder input id outside the vocabulary")
        return self.embed(ids) + self.pos(np.arange(offset, offset + length))

    def _run(self, ids, lengths, memory, memory_lengths, causal: bool, rng=None) -> Tensor:
        x = self._inputs(ids)
        length = x.shape[1]
        self_mask = padding_mask(lengths, length, x.dtype)
        if causal:
            self_mask = self_mask + causal_mask(length, x.dtype)
        mem_mask = padding_mask(memory_lengths, memory.shape[1], x.dtype)
        for layer in self.layers:
            x = layer(x, self_mask, memory, mem_mask, rng)
        return self.norm(x)


@dataclass
class CmlmOutput:
    """Decoder outputs for a CLS-prefixed batch.

    Position 0 is CLS (intent); positions 1..N are transcript tokens (ASR
    refinement and slot tags). ``lengths`` count CLS.
    """

    hidden: Tensor  # [B, N+1, D]
    asr_logits: Tensor  # [B, N+1, |V|], position 0 unused
    slu_logits: Tensor  # [B, N+1, |V|]
    lengths: np.ndarray
    vocab: JointVocabulary

    @property
    def asr_log_probs(self) -> Tensor:
        return F.log_softmax(F.getitem(self.asr_logits, (slice(None), slice(1, None))), axis=-1)

    @property
    def slu_log_probs(self) -> Tensor:
        return F.log_softmax(self.slu_logits, axis=-1)

    def asr_block_log_probs(self) -> Tensor:
        """[B, N, |ASR block|] over transcript positions."""
        return block_log_softmax(F.getitem(self.asr_logits, (slice(None), slice(1, None))), self.vocab.asr_block)

    def intent_log_probs(self) -> Tensor:
        """[B, |intent block|] read at CLS."""
        return block_log_softmax(F.getitem(self.slu_logits, (slice(None), 0)), self.vocab.intent_block)

    def slot_log_probs(self) -> Tensor:
        """[B, N, |slot block|] over transcript positions."""
        return block_log_softmax(F.getitem(self.slu_logits, (slice(None), slice(1, None))), self.vocab.slot_block)


class CmlmDecoder(_Trunk):
    """Bidirectional (no causal mask) decoder over [CLS] + partially masked tokens."""

    def __call__(self, ids, lengths, memory: Tensor, memory_lengths, vocab: JointVocabulary,
                 rng=None) -> CmlmOutput:
        h = self._run(ids, lengths, memory, memory_lengths, causal=False, rng=rng)
        return CmlmOutput(h, self.asr_head(h), self.slu_head(h), np.asarray(lengths), vocab)


@dataclass
class ArOutput:
    asr_logits: Tensor  # [B, L, |V|]
    slu_logits: Tensor


class ArDecoder(_Trunk):
    """Causal decoder; input is [SOS] + tokens, step j predicts token j+1 and its SLU label."""

    def __call__(self, ids, lengths, memory: Tensor, memory_lengths, rng=None) -> ArOutput:
        h = self._run(ids, lengths, memory, memory_lengths, causal=True, rng=rng)
        return ArOutput(self.asr_head(h), self.slu_head(h))

    def step(self, last_ids: np.ndarray, cache: Optional[list[np.ndarray]], memory: Tensor,
             memory_mask: np.ndarray) -> tuple[Tensor, Tensor, list[np.ndarray]]:
        """Advance every hypothesis by one position.

        ``cache[i]`` holds layer i's inputs at all earlier positions, [H, t, D]
        (None before the first step). Returns next-step (asr, slu) logits [H, |V|]
        and the extended cache.
        """
        t = 0 if cache is None else cache[0].shape[1]
        x = self._inputs(np.asarray(last_ids)[:, None], offset=t)
        new_cache = []
        for i, layer in enumerate(self.layers):
            hist = x.data if cache is None else np.concatenate([cache[i], x.data], axis=1)
            new_cache.append(hist)
            x = layer(x, None, memory, memory_mask, history=Tensor(hist))
        h = self.norm(x)
        last = (slice(None), 0)
        return F.getitem(self.asr_head(h), last), F.getitem(self.slu_head(h), last), new_cache
