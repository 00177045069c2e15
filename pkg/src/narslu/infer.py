"""Decoding: Mask-CTC refinement, SC-Mask-CTC layer-wise feedback, AR beam search."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ctc import CtcPrefixScorer, greedy_collapse, mask_by_confidence
from .models.decoder import CmlmOutput, block_log_softmax, embed_block
from .models.encoder import IntermediatePrediction
from .models.model import ArSluModel, NarSluModel
from .numerics.nn import padding_mask
from .numerics.tensor import Tensor, no_grad


@dataclass
class RefinementConfig:
    p_thresh: float = 0.999
    tap_thresholds: Optional[tuple[float, ...]] = None  # None: use the model's configured thresholds
    max_iterations: int = 10
    beam: int = 5
    ctc_weight: float = 0.3

    def validate(self) -> None:
        for p in (self.p_thresh, *(self.tap_thresholds or ())):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"thresholds must lie in [0, 1], got {p}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.beam < 1:
            raise ValueError("beam width must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")


@dataclass
class DecodeOutput:
    tokens: list[int]
    intent: int
    slots: list[int]
    iterations: int = 0
    trace: list[dict] = field(default_factory=list)
    cmlm_calls: int = 0
    score: Optional[float] = None  # AR only: length-normalised joint score
    truncated: bool = False

    def __post_init__(self):
        if len(self.slots) != len(self.tokens):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.slots)} slot tags")


# ------------------------------------------------------------------ helpers
def _encode_one(model, features: np.ndarray, hook=None):
    feats = np.asarray(features, dtype=np.float32)
    return model.encode(Tensor(feats[None]), np.array([feats.shape[0]]), hook=hook)


def _cmlm_batch(model: NarSluModel, seqs: Sequence[Sequence[int]], memory: Tensor,
                memory_lengths: np.ndarray) -> CmlmOutput:
    """Run the CMLM on CLS-prefixed sequences padded to a common length."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), model.vocab.pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return model.cmlm(ids, np.array([len(s) for s in seqs]), memory, memory_lengths)


def _slu_argmax(model, out: CmlmOutput, row: int, n: int) -> tuple[int, list[int]]:
    v = model.vocab
    intent = v.intent_block.start + int(np.argmax(out.intent_log_probs().data[row]))
    slots = v.slot_block.start + np.argmax(out.slot_log_probs().data[row, :n], axis=-1)
    return intent, [int(s) for s in slots]


def cmlm_distributions(cmlm: CmlmOutput, row: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Block-restricted CMLM probabilities placed on the |V| axis: (asr [N, V], slots [N, V], intent [V])."""
    v = cmlm.vocab
    n_tok = int(cmlm.lengths[row]) - 1
    size = cmlm.slu_logits.shape[-1]
    asr = embed_block(np.exp(cmlm.asr_block_log_probs().data[row, :n_tok]), v.asr_block, size)
    slots = embed_block(np.exp(cmlm.slot_log_probs().data[row, :n_tok]), v.slot_block, size)
    intent = embed_block(np.exp(cmlm.intent_log_probs().data[row]), v.intent_block, size)
    return asr, slots, intent


def feedback_augment(z: np.ndarray, asr: np.ndarray, slots: np.ndarray, intent: np.ndarray,
                     masked: Sequence[int], positions: Sequence[int]) -> np.ndarray:
    """Add CMLM outputs onto frame posteriors at the frames the tokens came from.

    z: [T, V]; asr, slots: [N, V]; intent: [V]. Token n was emitted at frame
    positions[n]. Masked tokens add their refined ASR distribution, every
    token adds its slot-tag distribution, and each of those frames adds the
    intent distribution. Other frames are returned unchanged.
    """
    n_tok = len(positions)
    if len(asr) != n_tok or len(slots) != n_tok:
        raise ValueError(f"{len(positions)} positions for {len(asr)} ASR / {len(slots)} slot rows")
    if len(set(positions)) != n_tok:
        raise ValueError("token positions must be distinct frames")
    out = np.array(z, copy=True)
    for n in masked:
        out[positions[n]] += asr[n]
    for n in range(n_tok):
        out[positions[n]] += slots[n]
    for s in positions:
        out[s] += intent
    return out


def tap_feedback(model: NarSluModel, pred: IntermediatePrediction, threshold: float,
                 trace: Optional[list] = None) -> np.ndarray:
    """Decode at a tap (greedy CTC, mask, CMLM) and return the augmented posteriors [B, T, |V|].

    Utterances with an empty intermediate hypothesis keep Z unchanged.
    """
    v = model.vocab
    with no_grad():
        probs = np.exp(pred.log_probs.data)
        aug = probs.copy()
        rows, seqs, info = [], [], []
        for b, t_len in enumerate(pred.lengths):
            res = greedy_collapse(probs[b, :t_len], v.blank)
            tokens, masked = mask_by_confidence(res, threshold, v.mask)
            info.append((res, tokens, masked))
            if res.tokens:
                rows.append(b)
                seqs.append([v.cls] + tokens)
        if rows:
            memory = Tensor(pred.x_out.data[rows])
            out = _cmlm_batch(model, seqs, memory, pred.lengths[rows])
            for i, b in enumerate(rows):
                res, _, masked = info[b]
                t_len = pred.lengths[b]
                asr, slots, intent = cmlm_distributions(out, row=i)
                aug[b, :t_len] = feedback_augment(probs[b, :t_len], asr, slots, intent, masked, res.positions)
        if trace is not None:
            for b, (res, tokens, masked) in enumerate(info):
                trace.append({"layer": pred.layer, "hypothesis": list(res.tokens), "masked": len(masked),
                              "cmlm": b in rows})
    return aug


# --------------------------------------------------------------- Mask-CTC
def mask_ctc_decode(features: np.ndarray, model: NarSluModel,
                    config: RefinementConfig = RefinementConfig()) -> DecodeOutput:
    config.validate()
    v = model.vocab
    with no_grad():
        enc = _encode_one(model, features)
        t_len = int(enc.lengths[0])
        res = greedy_collapse(np.exp(enc.log_probs.data[0, :t_len]), v.blank)
        tokens, conf = list(res.tokens), np.array(res.confidences)
        memory, mem_len = enc.x, enc.lengths
        trace: list[dict] = []
        last: Optional[CmlmOutput] = None
        iterations = calls = 0
        while tokens and iterations < config.max_iterations:
            masked = [n for n in range(len(tokens)) if conf[n] < config.p_thresh]
            if not masked:
                break
            seq = [v.cls] + [v.mask if n in masked else t for n, t in enumerate(tokens)]
            last = _cmlm_batch(model, [seq], memory, mem_len)
            calls += 1
            asr = np.exp(last.asr_block_log_probs().data[0])
            for n in masked:
                k = int(np.argmax(asr[n]))
                tokens[n] = v.asr_block.start + k
                conf[n] = asr[n, k]
            iterations += 1
            trace.append({"iteration": iterations, "masked": len(masked), "hypothesis": list(tokens)})
        if last is None:
            last = _cmlm_batch(model, [[v.cls] + tokens], memory, mem_len)
            calls += 1
        intent, slots = _slu_argmax(model, last, 0, len(tokens))
    return DecodeOutput(tokens, intent, slots, iterations, trace, calls)


# ------------------------------------------------------------ SC-Mask-CTC
def sc_mask_ctc_decode(features: np.ndarray, model: NarSluModel,
                       config: RefinementConfig = RefinementConfig()) -> DecodeOutput:
    """Layer-wise decoding: CMLM at every tap feeds the next layer, one final CMLM pass."""
    config.validate()
    v = model.vocab
    taps = model.config.encoder.taps
    thresholds = tuple(config.tap_thresholds if config.tap_thresholds is not None
                       else model.config.tap_thresholds)
    if len(thresholds) != len(taps):
        raise ValueError(f"{len(thresholds)} tap thresholds for {len(taps)} taps")
    by_layer = dict(zip(taps, thresholds))
    trace: list[dict] = []

    def hook(pred: IntermediatePrediction) -> np.ndarray:
        return tap_feedback(model, pred, by_layer[pred.layer], trace)

    with no_grad():
        enc = _encode_one(model, features, hook)
        t_len = int(enc.lengths[0])
        res = greedy_collapse(np.exp(enc.log_probs.data[0, :t_len]), v.blank)
        tokens, masked = mask_by_confidence(res, config.p_thresh, v.mask)
        out = _cmlm_batch(model, [[v.cls] + tokens], enc.x, enc.lengths)
        final = list(res.tokens)
        if masked:
            asr = out.asr_block_log_probs().data[0]
            for n in masked:
                final[n] = v.asr_block.start + int(np.argmax(asr[n]))
        intent, slots = _slu_argmax(model, out, 0, len(final))
    calls = sum(1 for t in trace if t["cmlm"]) + 1
    trace.append({"layer": "final", "hypothesis": final, "masked": len(masked), "cmlm": True})
    return DecodeOutput(final, intent, slots, 1, trace, calls)


# ------------------------------------------------------------- AR beam
@dataclass
class _Hyp:
    tokens: list[int]
    slots: list[int]
    score: float  # accumulated joint score
    ctc_score: float  # CTC prefix log-probability of ``tokens``
    ctc_state: np.ndarray  # [T, 2]
    row: int  # index into the decoder cache


def _ar_step_scores(model: ArSluModel, hyps: list[_Hyp], cache, memory, mem_mask, scorer, w):
    v = model.vocab
    last = np.array([h.tokens[-1] if h.tokens else model.sos for h in hyps])
    rows = np.array([h.row for h in hyps])
    sub_cache = None if cache is None else [c[rows] for c in cache]
    mem = Tensor(np.repeat(memory.data, len(hyps), axis=0))
    asr_logits, slu_logits, new_cache = model.decoder.step(last, sub_cache, mem, mem_mask)
    att = block_log_softmax(asr_logits, model.asr_targets).data.astype(np.float64)  # [H, C]
    slot_choice = v.slot_block.start + np.argmax(slu_logits.data[:, v.slot_block.start:v.slot_block.stop], -1)
    intent_choice = v.intent_block.start + np.argmax(
        slu_logits.data[:, v.intent_block.start:v.intent_block.stop], -1)
    states = np.stack([h.ctc_state for h in hyps])
    psi, r = scorer.score(states, [h.tokens[-1] if h.tokens else None for h in hyps],
                          [len(h.tokens) for h in hyps], model.asr_targets)
    prev = np.array([h.ctc_score for h in hyps])[:, None]
    base = np.array([h.score for h in hyps])[:, None]
    joint = base + (1.0 - w) * att
    if w > 0.0:
        with np.errstate(invalid="ignore"):
            gain = np.where(np.isneginf(psi), -np.inf, psi - prev)
        joint = joint + w * gain
    return joint, psi, r, slot_choice, intent_choice, new_cache


def ar_beam_decode(features: np.ndarray, model: ArSluModel,
                   config: RefinementConfig = RefinementConfig()) -> DecodeOutput:
    """Joint CTC/attention beam search; SLU labels ride along with each hypothesis."""
    config.validate()
    v, w, beam = model.vocab, config.ctc_weight, config.beam
    with no_grad():
        enc = _encode_one(model, features)
        t_len = int(enc.lengths[0])
        memory = Tensor(enc.x.data[:, :t_len])
        mem_mask = padding_mask([t_len], t_len, memory.dtype)
        scorer = CtcPrefixScorer(enc.log_probs.data[0, :t_len], v.blank, v.eos)
        running = [_Hyp([], [], 0.0, 0.0, scorer.initial_state(), 0)]
        done: list[tuple[float, _Hyp, int, float]] = []
        cache = None
        for _ in range(t_len + 1):
            joint, psi, r, slot_c, intent_c, cache = _ar_step_scores(model, running, cache, memory, mem_mask,
                                                                      scorer, w)
            flat = np.argsort(-joint, axis=None, kind="stable")[:beam]
            nxt = []
            for f in flat:
                h, c = divmod(int(f), joint.shape[1])
                hyp, sym, score = running[h], int(model.asr_targets[c]), float(joint[h, c])
                if sym == v.eos:
                    done.append((score / (len(hyp.tokens) + 1), hyp, int(intent_c[h]), score))
                else:
                    nxt.append(_Hyp(hyp.tokens + [sym], hyp.slots + [int(slot_c[h])], score, float(psi[h, c]),
                                    r[h, c], h))
            if not nxt or len(nxt[0].tokens) >= t_len:
                running = nxt
                break
            running = nxt
        truncated = not done
        if truncated:
            # no hypothesis ended within the length cap: fall back to the best running one
            best = max(running, key=lambda h: h.score)
            norm = best.score / max(len(best.tokens), 1)
            with no_grad():
                only = _Hyp(best.tokens, best.slots, best.score, best.ctc_score, best.ctc_state, 0)
                _, _, _, _, intent_c, _ = _ar_step_scores(model, [only], [c[[best.row]] for c in cache],
                                                          memory, mem_mask, scorer, w)
            return DecodeOutput(best.tokens, int(intent_c[0]), best.slots, 0, [], 0, norm, True)
        norm, best, intent, _ = max(done, key=lambda d: d[0])
    return DecodeOutput(best.tokens, intent, best.slots, 0, [], 0, norm, False)


def ar_greedy_decode(features: np.ndarray, model: ArSluModel, ctc_weight: float = 0.3) -> DecodeOutput:
    """Step-wise argmax of the joint score; reference for the beam-1 endpoint."""
    v = model.vocab
    with no_grad():
        enc = _encode_one(model, features)
        t_len = int(enc.lengths[0])
        memory = Tensor(enc.x.data[:, :t_len])
        mem_mask = padding_mask([t_len], t_len, memory.dtype)
        scorer = CtcPrefixScorer(enc.log_probs.data[0, :t_len], v.blank, v.eos)
        hyp = _Hyp([], [], 0.0, 0.0, scorer.initial_state(), 0)
        cache = None
        for _ in range(t_len + 1):
            joint, psi, r, slot_c, intent_c, cache = _ar_step_scores(model, [hyp], cache, memory, mem_mask,
                                                                      scorer, ctc_weight)
            c = int(np.argmax(joint[0]))
            sym = int(model.asr_targets[c])
            if sym == v.eos:
                score = float(joint[0, c])
                return DecodeOutput(hyp.tokens, int(intent_c[0]), hyp.slots, 0, [], 0,
                                    score / (len(hyp.tokens) + 1), False)
            hyp = _Hyp(hyp.tokens + [sym], hyp.slots + [int(slot_c[0])], float(joint[0, c]), float(psi[0, c]),
                       r[0, c], 0)
            if len(hyp.tokens) >= t_len:
                break
    joint, *_rest, intent_c, _ = _ar_step_scores(model, [hyp], cache, memory, mem_mask, scorer, ctc_weight)
    return DecodeOutput(hyp.tokens, int(intent_c[0]), hyp.slots, 0, [], 0, hyp.score / max(len(hyp.tokens), 1),
                        True)


# ------------------------------------------------------------- dispatch
def decode(features: np.ndarray, model, config: RefinementConfig = RefinementConfig()) -> DecodeOutput:
    if isinstance(model, ArSluModel):
        return ar_beam_decode(features, model, config)
    if model.kind == "sc-mask-ctc":
        return sc_mask_ctc_decode(features, model, config)
    return mask_ctc_decode(features, model, config)


def decode_dataset(utts, model, config: RefinementConfig = RefinementConfig()) -> tuple[list[DecodeOutput], list[float]]:
    """Decode utterances one at a time; returns outputs and per-utterance wall seconds."""
    outs, times = [], []
    for u in utts:
        start = time.perf_counter()
        outs.append(decode(u.features, model, config))
        times.append(time.perf_counter() - start)
    return outs, times


def output_record(utt_id: str, out: DecodeOutput, vocab, wall_time: Optional[float] = None) -> dict:
    rec = {
        "id": utt_id,
        "transcript": " ".join(vocab.symbol(t) for t in out.tokens),
        "intent": vocab.symbol(out.intent),
        "slots": [vocab.symbol(s) for s in out.slots],
        "iterations": out.iterations,
    }
    if out.truncated:
        rec["truncated"] = True
    if wall_time is not None:
        rec["wall_time"] = wall_time
    return rec
