"""Composite losses, the training loop and resumable checkpoints.

Every loss term is summed over the positions of an utterance and averaged
over the batch, except the CMLM ASR term, which averages over the masked
positions of each utterance before the batch mean.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .ctc import ctc_loss_batch
from .data.batching import Batch, make_batches, mask_targets
from .data.corpus import Utterance
from .infer import RefinementConfig, decode_dataset, output_record, tap_feedback
from .metrics import evaluate
from .models.decoder import CmlmOutput, block_log_softmax
from .models.model import ArSluModel, Model, NarSluModel, load_model, save_model
from .numerics import functional as F
from .numerics.optim import AdamState, adam_step
from .numerics.tensor import NumericError, Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lam: float = 0.4  # CTC vs CMLM
    eta: float = 0.5  # final vs intermediate CTC
    gamma: float = 0.5  # ASR vs SLU inside the CMLM term
    mu: float = 0.4  # SC-CTC vs CMLM
    ar_ctc: float = 0.3

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"loss weight {name}={value} outside [0, 1]")


# ---------------------------------------------------------------- loss terms
def _gather(lp: Tensor, b: Sequence[int], n: Sequence[int], k: Sequence[int]) -> Tensor:
    return F.getitem(lp, (np.asarray(b, dtype=np.int64), np.asarray(n, dtype=np.int64),
                          np.asarray(k, dtype=np.int64)))


def ctc_term(log_probs: Tensor, lengths, targets: Sequence[Sequence[int]], blank: int = 0) -> Tensor:
    return F.mean(ctc_loss_batch(log_probs, targets, lengths, blank))


def loss_cmlm(out: CmlmOutput, masked: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean NLL of the true pieces at masked positions (per utterance), averaged over the batch.

    ``masked[b]`` indexes transcript tokens; decoder positions are offset by CLS,
    which :meth:`CmlmOutput.asr_block_log_probs` already strips.
    """
    start = out.vocab.asr_block.start
    bs, ns, ks, ws = [], [], [], []
    for b, (idx, tgt) in enumerate(zip(masked, targets)):
        if not idx:
            raise ValueError(f"utterance {b} has no masked positions")
        for n in idx:
            bs.append(b)
            ns.append(n)
            ks.append(tgt[n] - start)
            ws.append(1.0 / len(idx))
    lp = out.asr_block_log_probs()
    picked = _gather(lp, bs, ns, ks)
    return -F.sum(picked * np.asarray(ws, dtype=picked.dtype)) / len(masked)


def loss_slu(out: CmlmOutput, intents: Sequence[int], slots: Sequence[Sequence[int]]) -> Tensor:
    """-log P(intent | h_0) - sum_n log P(tag_n | h_n), averaged over the batch."""
    v = out.vocab
    if len(intents) != len(slots):
        raise ValueError("intent and slot target counts differ")
    intent_lp = out.intent_log_probs()
    rows = np.arange(len(intents))
    intent_nll = -F.sum(F.getitem(intent_lp, (rows, np.asarray(intents) - v.intent_block.start)))
    bs = [b for b, tags in enumerate(slots) for _ in tags]
    ns = [n for tags in slots for n in range(len(tags))]
    ks = [t - v.slot_block.start for tags in slots for t in tags]
    total = intent_nll
    if bs:
        total = total - F.sum(_gather(out.slot_log_probs(), bs, ns, ks))
    return total / len(intents)


def loss_slu_parts(out: CmlmOutput, intents, slots) -> tuple[Tensor, Tensor]:
    """Intent-only and slot-only parts of :func:`loss_slu` (batch means)."""
    empty = [[] for _ in slots]
    intent_only = loss_slu(out, intents, empty)
    return intent_only, loss_slu(out, intents, slots) - intent_only


def cmlm_inputs(batch: Batch, model: NarSluModel, rng: np.random.Generator):
    """CLS-prefixed masked ground truth for every utterance -> (ids [B, N+1], lengths, masked)."""
    v = model.vocab
    seqs, masked = [], []
    for toks in batch.token_lists():
        seq, idx = mask_targets(toks, rng, v)
        seqs.append(seq)
        masked.append(idx)
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), v.pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids, np.array([len(s) for s in seqs]), masked


def nar_terms(batch: Batch, model: NarSluModel, rng: np.random.Generator, feedback: bool = False,
              train_rng: Optional[np.random.Generator] = None) -> dict[str, Tensor]:
    """All loss components of a NAR model on one batch.

    Keys: ctc (final layer), inter (mean tap CTC; absent without taps), asr, slu.
    With ``feedback`` every tap runs the (no-grad) CMLM decoding pass and feeds
    the augmented posteriors forward; those passes add no loss terms.
    """
    v = model.vocab
    targets = batch.token_lists()
    hook = None
    if feedback and model.config.encoder.taps:
        thresholds = dict(zip(model.config.encoder.taps, model.config.tap_thresholds))

        def hook(pred):
            return tap_feedback(model, pred, thresholds[pred.layer])

    enc = model.encode_batch(batch, hook=hook, rng=train_rng)
    terms = {"ctc": ctc_term(enc.log_probs, enc.lengths, targets, v.blank)}
    if enc.intermediates:
        per_tap = [ctc_term(p.log_probs, p.lengths, targets, v.blank) for p in enc.intermediates]
        inter = per_tap[0]
        for t in per_tap[1:]:
            inter = inter + t
        terms["inter"] = inter / len(per_tap)
    ids, lengths, masked = cmlm_inputs(batch, model, rng)
    out = model.cmlm(ids, lengths, enc.x, enc.lengths, rng=train_rng)
    terms["asr"] = loss_cmlm(out, masked, targets)
    terms["slu"] = loss_slu(out, batch.intents, batch.slot_lists())
    return terms


def combine_mask_ctc(terms: dict, w: LossWeights) -> Tensor:
    return w.lam * terms["ctc"] + (1.0 - w.lam) * (w.gamma * terms["asr"] + (1.0 - w.gamma) * terms["slu"])


def combine_sc_ctc(terms: dict, w: LossWeights) -> Tensor:
    if "inter" not in terms:
        if w.eta < 1.0:
            raise ValueError("self-conditioned CTC loss needs at least one tap when eta < 1")
        return 1.0 * terms["ctc"]
    return w.eta * terms["ctc"] + (1.0 - w.eta) * terms["inter"]


def combine_sc_mask_ctc(terms: dict, w: LossWeights) -> Tensor:
    joint = w.gamma * terms["asr"] + (1.0 - w.gamma) * terms["slu"]
    return w.mu * combine_sc_ctc(terms, w) + (1.0 - w.mu) * joint


def loss_mask_ctc(batch, model, weights: LossWeights, rng) -> tuple[Tensor, dict]:
    terms = nar_terms(batch, model, rng)
    return combine_mask_ctc(terms, weights), terms


def loss_sc_ctc(batch, model, weights: LossWeights, rng) -> tuple[Tensor, dict]:
    terms = nar_terms(batch, model, rng)
    return combine_sc_ctc(terms, weights), terms


def loss_sc_mask_ctc(batch, model, weights: LossWeights, rng, feedback: bool = True,
                     train_rng=None) -> tuple[Tensor, dict]:
    terms = nar_terms(batch, model, rng, feedback=feedback, train_rng=train_rng)
    return combine_sc_mask_ctc(terms, weights), terms


def ar_terms(batch: Batch, model: ArSluModel, train_rng=None) -> dict[str, Tensor]:
    """CTC, teacher-forced ASR cross-entropy (EOS-terminated) and SLU cross-entropy."""
    v = model.vocab
    targets = batch.token_lists()
    slot_targets = batch.slot_lists()
    enc = model.encode_batch(batch, rng=train_rng)
    terms = {"ctc": ctc_term(enc.log_probs, enc.lengths, targets, v.blank)}
    bsz = len(targets)
    width = max(len(t) for t in targets) + 1
    ids = np.full((bsz, width), v.pad, dtype=np.int64)
    for i, t in enumerate(targets):
        ids[i, :len(t) + 1] = [model.sos] + list(t)
    lengths = np.array([len(t) + 1 for t in targets])
    out = model.decode_parallel(ids, lengths, enc.x, enc.lengths, rng=train_rng)

    # ASR: candidate column 0 is EOS, column 1 + k is piece asr_block.start + k
    att = block_log_softmax(out.asr_logits, model.asr_targets)
    bs = [b for b, t in enumerate(targets) for _ in range(len(t) + 1)]
    ns = [n for t in targets for n in range(len(t) + 1)]
    ks = [k for t in targets for k in [tok - v.asr_block.start + 1 for tok in t] + [0]]
    terms["asr"] = -F.sum(_gather(att, bs, ns, ks)) / bsz

    # SLU: slot tag of token j at step j, intent at the EOS step
    slot_lp = block_log_softmax(out.slu_logits, v.slot_block)
    intent_lp = block_log_softmax(out.slu_logits, v.intent_block)
    sb = [b for b, s in enumerate(slot_targets) for _ in s]
    sn = [n for s in slot_targets for n in range(len(s))]
    sk = [tag - v.slot_block.start for s in slot_targets for tag in s]
    intent_part = -F.sum(_gather(intent_lp, np.arange(bsz), [len(t) for t in targets],
                                 np.asarray(batch.intents) - v.intent_block.start))
    slu = intent_part - F.sum(_gather(slot_lp, sb, sn, sk)) if sb else intent_part
    terms["slu"] = slu / bsz
    return terms


def combine_ar(terms: dict, w: LossWeights) -> Tensor:
    return w.ar_ctc * terms["ctc"] + (1.0 - w.ar_ctc) * (terms["asr"] + terms["slu"])


def loss_ar(batch, model, weights: LossWeights, rng=None) -> tuple[Tensor, dict]:
    terms = ar_terms(batch, model)
    return combine_ar(terms, weights), terms


def model_loss(batch: Batch, model: Model, weights: LossWeights, rng: np.random.Generator,
               train_rng=None) -> tuple[Tensor, dict]:
    """Training objective for the model's kind."""
    if isinstance(model, ArSluModel):
        terms = ar_terms(batch, model, train_rng)
        return combine_ar(terms, weights), terms
    if model.kind == "sc-mask-ctc":
        return loss_sc_mask_ctc(batch, model, weights, rng, feedback=True, train_rng=train_rng)
    terms = nar_terms(batch, model, rng, train_rng=train_rng)
    return combine_mask_ctc(terms, weights), terms


# ------------------------------------------------------------------ training
class TrainingDivergedError(RuntimeError):
    """Loss became NaN/Inf; a diagnostic snapshot was written if possible."""


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    decode_dev: bool = True  # decode the dev set each epoch for WER / IC / SLU-F1
    dev_limit: Optional[int] = None  # decode only the first n dev utterances
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    max_seconds: Optional[float] = None  # stop after the epoch that crosses this budget

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        self.weights.validate()
        self.refinement.validate()


@dataclass
class TrainState:
    epoch: int = 0
    optimizer: AdamState = field(default_factory=AdamState)
    rng_state: Optional[dict] = None
    best_metric: Optional[float] = None
    best_epoch: Optional[int] = None
    history: list[dict] = field(default_factory=list)


def _param_dict(model: Model) -> dict[str, Tensor]:
    return dict(model.named_parameters())


def train_step(model: Model, batch: Batch, state: AdamState, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[AdamState, dict[str, float]]:
    """Forward, backward and one Adam update. Returns the new optimizer state and loss values."""
    model.train()
    params = _param_dict(model)
    model.zero_grad()
    loss, terms = model_loss(batch, model, cfg.weights, rng, train_rng=rng)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} on batch {batch.ids[:4]}...")
    backward(loss)
    values = {k: p.data for k, p in params.items()}
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    values, state = adam_step(values, grads, state, cfg.lr)
    for k, p in params.items():
        p.data = values[k]
    model.eval()
    return state, {"loss": value, **{k: float(t.data) for k, t in terms.items()}}


def dev_loss(model: Model, dev: Sequence[Utterance], cfg: TrainConfig) -> float:
    """Batch-size-weighted mean objective on the dev set with a fixed masking seed."""
    rng = np.random.default_rng(cfg.seed + 7919)
    total = count = 0.0
    with no_grad():
        for batch in make_batches(dev, cfg.batch_size, cfg.seed, model.vocab):
            loss, _ = model_loss(batch, model, cfg.weights, rng)
            total += float(loss.data) * len(batch)
            count += len(batch)
    return total / count


def dev_metrics(model: Model, dev: Sequence[Utterance], cfg: TrainConfig) -> dict:
    utts = list(dev)[:cfg.dev_limit] if cfg.dev_limit else list(dev)
    outs, _ = decode_dataset(utts, model, cfg.refinement)
    refs = [{"transcript": u.text or " ".join(model.vocab.symbol(t) for t in u.tokens),
             "intent": model.vocab.symbol(u.intent), "slots": [model.vocab.symbol(s) for s in u.slots]}
            for u in utts]
    hyps = [output_record(u.id, o, model.vocab) for u, o in zip(utts, outs)]
    rep = evaluate(refs, hyps)
    return {"dev_wer": rep.wer, "dev_ic_acc": rep.ic_acc, "dev_slu_f1": rep.slu_f1}


def _optimizer_arrays(state: AdamState) -> dict[str, np.ndarray]:
    arrays = {f"adam_m/{k}": v for k, v in state.m.items()}
    arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    return arrays


def save_training_checkpoint(path, model: Model, state: TrainState) -> None:
    meta = {"epoch": state.epoch, "adam_step": state.optimizer.step, "rng_state": state.rng_state,
            "best_metric": state.best_metric, "best_epoch": state.best_epoch,
            # wall times vary run to run; keep checkpoints a pure function of the seed
            "history": [{k: v for k, v in r.items() if k != "wall_time"} for r in state.history]}
    save_model(path, model, _optimizer_arrays(state.optimizer), meta)


def load_training_checkpoint(path) -> tuple[Model, TrainState]:
    model, extra, header = load_model(path)
    opt = AdamState(step=int(header.get("adam_step", 0)),
                    m={k[7:]: v for k, v in extra.items() if k.startswith("adam_m/")},
                    v={k[7:]: v for k, v in extra.items() if k.startswith("adam_v/")})
    state = TrainState(epoch=int(header.get("epoch", 0)), optimizer=opt, rng_state=header.get("rng_state"),
                       best_metric=header.get("best_metric"), best_epoch=header.get("best_epoch"),
                       history=list(header.get("history", [])))
    return model, state


def _rng_from_state(seed: int, saved: Optional[dict]) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if saved is not None:
        rng.bit_generator.state = saved
    return rng


def train(model: Model, train_set: Sequence[Utterance], dev_set: Sequence[Utterance], cfg: TrainConfig,
          out_dir: Union[str, Path, None] = None, state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Seeded, resumable training loop.

    Each epoch: reshuffle (seed + epoch), one Adam step per batch, then dev
    loss and (optionally) dev decoding metrics. With ``out_dir`` the loop
    writes ``train_log.jsonl``, ``last.ckpt`` after every epoch and
    ``best.ckpt`` whenever the dev loss improves. Passing a ``state`` loaded
    from ``last.ckpt`` continues exactly where that run stopped.
    """
    cfg.validate()
    state = state or TrainState()
    rng = _rng_from_state(cfg.seed, state.rng_state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if state.epoch == 0:
            (out / "train_log.jsonl").write_text("")
    start = time.perf_counter()
    model.eval()
    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        seen = 0
        for batch in make_batches(train_set, cfg.batch_size, cfg.seed + epoch, model.vocab):
            try:
                state.optimizer, values = train_step(model, batch, state.optimizer, cfg, rng)
            except NumericError as err:
                if out is not None:
                    save_training_checkpoint(out / "nan_snapshot.ckpt", model, state)
                raise TrainingDivergedError(f"epoch {epoch}: {err}") from err
            for k, val in values.items():
                sums[k] = sums.get(k, 0.0) + val * len(batch)
            seen += len(batch)
        record = {"epoch": epoch, "losses": {k: s / seen for k, s in sums.items()}}
        record["dev_loss"] = dev_loss(model, dev_set, cfg) if dev_set else None
        if dev_set and cfg.decode_dev:
            record.update(dev_metrics(model, dev_set, cfg))
        record["wall_time"] = time.perf_counter() - t0
        state.epoch = epoch
        state.rng_state = rng.bit_generator.state
        state.history.append(record)
        improved = record["dev_loss"] is not None and (state.best_metric is None
                                                       or record["dev_loss"] < state.best_metric)
        if improved:
            state.best_metric, state.best_epoch = record["dev_loss"], epoch
        log.info("epoch %d loss %.4f dev %s", epoch, record["losses"]["loss"], record["dev_loss"])
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            save_training_checkpoint(out / "last.ckpt", model, state)
            if improved:
                save_training_checkpoint(out / "best.ckpt", model, state)
        if on_epoch is not None:
            on_epoch(record)
        if cfg.max_seconds is not None and time.perf_counter() - start > cfg.max_seconds:
            log.info("time budget reached after epoch %d", epoch)
            break
    return state
