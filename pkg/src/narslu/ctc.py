"""CTC loss, greedy decoding with position tracking, and prefix scoring.

All dynamic programmes run in float64 log space regardless of the input
dtype. The blank symbol defaults to id 0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics.tensor import NumericError, Tensor, make_node

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted within the available frames."""


@dataclass
class CtcDecodeResult:
    tokens: list[int] = field(default_factory=list)
    confidences: list[float] = field(default_factory=list)
    positions: list[int] = field(default_factory=list)
    alignment: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class CtcLossResult:
    nll: float
    grad: np.ndarray  # d nll / d log_probs, shape [T, V]


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def collapse(alignment: Sequence[int], blank: int = 0) -> list[int]:
    """Merge runs of identical symbols, then drop blanks."""
    out = []
    prev = None
    for a in alignment:
        if a != prev and a != blank:
            out.append(int(a))
        prev = a
    return out


# --------------------------------------------------------------------- loss
def _forward_backward(log_probs: np.ndarray, targets: np.ndarray, input_lengths: np.ndarray,
                      target_lengths: np.ndarray, blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched CTC. Returns (nll [B], d nll / d log_probs [B, T, V]) in float64."""
    lp = np.asarray(log_probs, dtype=np.float64)
    b_size, t_max, vocab = lp.shape
    u_max = targets.shape[1] if targets.ndim == 2 else 0
    s_max = 2 * u_max + 1
    ext = np.full((b_size, s_max), blank, dtype=np.int64)
    if u_max:
        ext[:, 1::2] = targets
    # skip transition s-2 -> s allowed for labels differing from the label two back
    skip = np.zeros((b_size, s_max), dtype=bool)
    if s_max > 2:
        skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    s_idx = np.arange(s_max)
    valid_state = s_idx[None, :] <= 2 * target_lengths[:, None]

    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (b_size, t_max, s_max)), axis=2)

    alpha = np.full((t_max, b_size, s_max), NEG_INF)
    alpha[0, :, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[0, :, 1] = np.where(target_lengths > 0, emit[:, 0, 1], NEG_INF)
    for t in range(1, t_max):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        if s_max > 2:
            acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
        alpha[t] = acc + emit[:, t]

    # beta[t, s]: log prob of finishing from state s at frame t, emission at t excluded
    beta = np.full((t_max, b_size, s_max), NEG_INF)
    last = input_lengths - 1
    final = np.full((b_size, s_max), NEG_INF)
    end = 2 * target_lengths
    rows = np.arange(b_size)
    final[rows, end] = 0.0
    has_label = target_lengths > 0
    final[rows[has_label], end[has_label] - 1] = 0.0
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            nxt = beta[t + 1] + emit[:, t + 1]
            acc = nxt.copy()
            acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
            if s_max > 2:
                acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
            beta[t] = acc
        beta[t] = np.where((last == t)[:, None], final, np.where((t > last)[:, None], NEG_INF, beta[t]))

    a_end = alpha[last, rows]  # [B, S]
    loglik = np.logaddexp(a_end[rows, end], np.where(has_label, a_end[rows, np.maximum(end - 1, 0)], NEG_INF))
    if not np.all(np.isfinite(loglik)):
        raise NumericError("CTC log-likelihood is not finite")

    log_gamma = alpha + beta - loglik[None, :, None]  # [T, B, S]
    gamma = np.where(valid_state[None], np.exp(log_gamma), 0.0)
    onehot = np.zeros((b_size, s_max, vocab))
    onehot[rows[:, None], s_idx[None, :], ext] = 1.0
    grad = -np.einsum("tbs,bsv->btv", gamma, onehot)
    frame_ok = np.arange(t_max)[None, :] < input_lengths[:, None]
    grad *= frame_ok[:, :, None]
    return -loglik, grad


def _check_feasible(target_lengths, input_lengths, targets) -> None:
    for b, (u, t) in enumerate(zip(target_lengths, input_lengths)):
        need = min_frames(list(targets[b, :u]))
        if need > t:
            raise InfeasibleTargetError(
                f"target of length {u} needs {need} frames but only {t} are available (item {b})")


def _pad_targets(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(t) for t in targets], dtype=np.int64)
    out = np.zeros((len(targets), max(int(lens.max(initial=0)), 0)), dtype=np.int64)
    for i, t in enumerate(targets):
        out[i, :len(t)] = t
    return out, lens


def ctc_loss(log_probs, target: Sequence[int], blank: int = 0) -> CtcLossResult:
    """Negative log-likelihood of ``target`` under frame log-probabilities [T, V]."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    targets, tlens = _pad_targets([list(target)])
    ilens = np.array([lp.shape[0]])
    _check_feasible(tlens, ilens, targets)
    nll, grad = _forward_backward(lp[None], targets, ilens, tlens, blank)
    return CtcLossResult(float(nll[0]), grad[0])


def ctc_loss_batch(log_probs: Tensor, targets: Sequence[Sequence[int]], input_lengths: Sequence[int],
                   blank: int = 0) -> Tensor:
    """Differentiable per-utterance CTC NLL. log_probs: [B, T, V] -> Tensor[B]."""
    padded, tlens = _pad_targets(targets)
    ilens = np.asarray(input_lengths, dtype=np.int64)
    _check_feasible(tlens, ilens, padded)
    nll, grad = _forward_backward(log_probs.data, padded, ilens, tlens, blank)
    dtype = log_probs.dtype
    grad = grad.astype(dtype)
    return make_node(nll.astype(dtype), (log_probs,), lambda g: (grad * g[:, None, None],), "ctc_loss")


def brute_force_ctc(log_probs, target: Sequence[int], blank: int = 0) -> float:
    """Exact NLL by enumerating all V^T alignments (T <= 8, V <= 5)."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    t_len, vocab = lp.shape
    if t_len > 8 or vocab > 5:
        raise ValueError(f"enumeration bound exceeded: T={t_len}, V={vocab} (max 8, 5)")
    target = [int(x) for x in target]
    terms = []
    for path in itertools.product(range(vocab), repeat=t_len):
        if collapse(path, blank) == target:
            terms.append(math.exp(sum(lp[t, k] for t, k in enumerate(path))))
    total = math.fsum(terms)
    if total == 0.0:
        raise InfeasibleTargetError(f"no alignment of {t_len} frames emits {target}")
    return -math.log(total)


# ----------------------------------------------------------------- decoding
def greedy_collapse(probs, blank: int = 0) -> CtcDecodeResult:
    """Best-path decoding that remembers where each token was emitted.

    Within a run of one non-blank id, the token's position is the frame where
    that id has its highest probability; its confidence is that probability.
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    alignment = p.argmax(axis=-1)
    result = CtcDecodeResult(alignment=[int(a) for a in alignment])
    t_len = len(alignment)
    t = 0
    while t < t_len:
        sym = alignment[t]
        end = t + 1
        while end < t_len and alignment[end] == sym:
            end += 1
        if sym != blank:
            pos = t + int(np.argmax(p[t:end, sym]))
            result.tokens.append(int(sym))
            result.positions.append(pos)
            result.confidences.append(float(p[pos, sym]))
        t = end
    return result


def mask_by_confidence(result: CtcDecodeResult, p_thresh: float, mask_id: int) -> tuple[list[int], list[int]]:
    """Replace tokens whose confidence is strictly below ``p_thresh`` by ``mask_id``."""
    if not 0.0 <= p_thresh <= 1.0:
        raise ValueError(f"p_thresh must lie in [0, 1], got {p_thresh}")
    masked = [n for n, c in enumerate(result.confidences) if c < p_thresh]
    tokens = list(result.tokens)
    for n in masked:
        tokens[n] = mask_id
    return tokens, masked


# ------------------------------------------------------------ prefix scores
def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=np.float64))


def ctc_prefix_score(probs, prefix: Sequence[int], blank: int = 0, complete: bool = False) -> float:
    """log P(labelling starts with ``prefix``), or log P(labelling == prefix) if ``complete``."""
    lp = _log(probs.data if isinstance(probs, Tensor) else probs)
    t_len = lp.shape[0]
    r_n = np.full(t_len, NEG_INF)
    r_b = np.cumsum(lp[:, blank])
    psi = 0.0
    last = None
    for c in prefix:
        phi = r_b if c == last else np.logaddexp(r_b, r_n)
        new_n = np.full(t_len, NEG_INF)
        new_b = np.full(t_len, NEG_INF)
        if last is None:
            new_n[0] = lp[0, c]
        psi = new_n[0]
        for t in range(1, t_len):
            new_n[t] = np.logaddexp(new_n[t - 1], phi[t - 1]) + lp[t, c]
            new_b[t] = np.logaddexp(new_n[t - 1], new_b[t - 1]) + lp[t, blank]
            psi = np.logaddexp(psi, phi[t - 1] + lp[t, c])
        r_n, r_b, last = new_n, new_b, c
    if complete:
        return float(np.logaddexp(r_n[-1], r_b[-1]))
    return float(psi)


class CtcPrefixScorer:
    """Incremental prefix scoring for beam search, vectorised over hypotheses and candidates.

    A hypothesis state is an array ``r`` of shape [T, 2] holding the log
    probabilities of the prefix ending in a non-blank (column 0) or blank
    (column 1) at each frame, plus the prefix's last token.
    """

    def __init__(self, log_probs: np.ndarray, blank: int = 0, eos: Optional[int] = None):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank
        self.eos = eos

    def initial_state(self) -> np.ndarray:
        r = np.full((self.lp.shape[0], 2), NEG_INF)
        r[:, 1] = np.cumsum(self.lp[:, self.blank])
        return r

    def score(self, states: np.ndarray, lasts: Sequence[Optional[int]], lengths: Sequence[int],
              candidates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Prefix log-probabilities for every (hypothesis, candidate) extension.

        states: [H, T, 2]; lasts/lengths: per hypothesis last token (None if
        empty) and prefix length; candidates: [C]. Returns psi [H, C] and new
        states [H, C, T, 2]. The ``eos`` candidate scores the complete prefix.
        """
        h_n, t_len = states.shape[0], self.lp.shape[0]
        cand = np.asarray(candidates)
        xs = self.lp[:, cand]  # [T, C]
        r_sum = np.logaddexp(states[:, :, 0], states[:, :, 1])  # [H, T]
        phi = np.repeat(r_sum[:, :, None], len(cand), axis=2)  # [H, T, C]
        for h, last in enumerate(lasts):
            if last is not None:
                same = cand == last
                phi[h][:, same] = states[h, :, 1][:, None]
        r = np.full((h_n, len(cand), t_len, 2), NEG_INF)
        empty = np.array([n == 0 for n in lengths])
        r[empty, :, 0, 0] = xs[0][None, :]
        psi = r[:, :, 0, 0].copy()
        blank_lp = self.lp[:, self.blank]
        for t in range(1, t_len):
            r[:, :, t, 0] = np.logaddexp(r[:, :, t - 1, 0], phi[:, t - 1]) + xs[t][None]
            r[:, :, t, 1] = np.logaddexp(r[:, :, t - 1, 0], r[:, :, t - 1, 1]) + blank_lp[t]
            psi = np.logaddexp(psi, phi[:, t - 1] + xs[t][None])
        if self.eos is not None:
            psi[:, cand == self.eos] = r_sum[:, -1][:, None]
        return psi, r
