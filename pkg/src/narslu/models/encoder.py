"""Convolutional front-end and Conformer encoder with self-conditioning taps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..numerics import functional as F
from ..numerics.nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, padding_mask, \
    parameter, xavier
from ..numerics.tensor import ShapeError, Tensor
from .config import EncoderConfig

# Both subsampling convolutions: kernel 3, stride 2, one frame of left padding.
_KERNEL, _STRIDE, _PAD = 3, 2, (1, 0)


class FrontendError(ShapeError):
    """Input too short to survive 4x subsampling."""


def subsampled_length(t_raw):
    """Frames after the front-end: two applications of floor((t + 1 - 3) / 2) + 1, i.e. t // 4."""
    t = np.asarray(t_raw)
    for _ in range(2):
        t = (t + _PAD[0] + _PAD[1] - _KERNEL) // _STRIDE + 1
    return t


class Subsampler(Module):
    """Two strided conv stages (x4 frame-rate reduction) then a projection to D.

    Left-only padding keeps every valid output frame a function of valid
    input frames, so batch padding never leaks into real frames.
    """

    def __init__(self, rng: np.random.Generator, input_dim: int, d_model: int):
        self.conv1_w = parameter(xavier(rng, 3 * input_dim, d_model, (3, input_dim, d_model)))
        self.conv1_b = parameter(np.zeros(d_model))
        self.conv2_w = parameter(xavier(rng, 3 * d_model, d_model, (3, d_model, d_model)))
        self.conv2_b = parameter(np.zeros(d_model))
        self.proj = Linear(rng, d_model, d_model)

    def __call__(self, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        if x.shape[1] < 4 or np.any(np.asarray(lengths) < 4):
            raise FrontendError(f"need at least 4 input frames, got lengths {np.asarray(lengths).tolist()}")
        h = F.relu(F.conv1d(x, self.conv1_w, self.conv1_b, _STRIDE, _PAD))
        h = F.relu(F.conv1d(h, self.conv2_w, self.conv2_b, _STRIDE, _PAD))
        return self.proj(h), subsampled_length(lengths)


class ConvModule(Module):
    """Pointwise -> GLU -> depthwise -> LayerNorm -> swish -> pointwise."""

    def __init__(self, rng: np.random.Generator, dim: int, kernel: int):
        self.pw1 = Linear(rng, dim, 2 * dim)
        self.dw_w = parameter(rng.normal(0.0, kernel ** -0.5, size=(kernel, dim)))
        self.dw_b = parameter(np.zeros(dim))
        self.norm = LayerNorm(dim)
        self.pw2 = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, frame_mask: np.ndarray) -> Tensor:
        h = F.glu(self.pw1(x))
        h = F.mul(h, frame_mask)  # padding frames must not enter the depthwise window
        h = F.depthwise_conv1d(h, self.dw_w, self.dw_b)
        return self.pw2(F.silu(self.norm(h)))


class ConformerBlock(Module):
    """Pre-norm macaron block: FF/2, self-attention, conv, FF/2, final norm."""

    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        d = cfg.d_model
        self.ff1_norm = LayerNorm(d)
        self.ff1 = FeedForward(rng, d, cfg.ff_dim, "silu", cfg.dropout)
        self.att_norm = LayerNorm(d)
        self.att = MultiHeadAttention(rng, d, cfg.heads, cfg.dropout)
        self.conv_norm = LayerNorm(d)
        self.conv = ConvModule(rng, d, cfg.kernel)
        self.ff2_norm = LayerNorm(d)
        self.ff2 = FeedForward(rng, d, cfg.ff_dim, "silu", cfg.dropout)
        self.out_norm = LayerNorm(d)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, key_mask: np.ndarray, frame_mask: np.ndarray,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        x = x + 0.5 * self.ff1(self.ff1_norm(x), rng)
        h = self.att_norm(x)
        x = x + self.att(h, h, key_mask, rng)
        x = x + F.dropout(self.conv(self.conv_norm(x), frame_mask), self.dropout, rng, self.training)
        x = x + 0.5 * self.ff2(self.ff2_norm(x), rng)
        return self.out_norm(x)


@dataclass
class IntermediatePrediction:
    """What a tap exposes: layer number, frame log-posteriors log Z^l, and the normalised layer output."""

    layer: int
    log_probs: Tensor  # [B, T, |V|]
    x_out: Tensor  # after_norm(X^l_out), [B, T, D]
    lengths: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


@dataclass
class EncoderOutput:
    x: Tensor  # after_norm of the last block, [B, T, D]
    log_probs: Tensor  # final CTC log-posteriors, [B, T, |V|]
    lengths: np.ndarray
    intermediates: list[IntermediatePrediction]


# A hook receives a tap's prediction and returns the distribution to condition on
# ([B, T, |V|] numpy), or None to use Z^l itself.
FeedbackHook = Callable[[IntermediatePrediction], Optional[np.ndarray]]


class ConformerEncoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig):
        cfg.validate()
        self.cfg = cfg
        self.frontend = Subsampler(rng, cfg.input_dim, cfg.d_model)
        self.pos = Embedding(rng, cfg.max_frames, cfg.d_model)
        self.blocks = [ConformerBlock(rng, cfg) for _ in range(cfg.layers)]
        self.after_norm = LayerNorm(cfg.d_model)
        self.ctc_head = Linear(rng, cfg.d_model, cfg.vocab_size)
        # shared by every tap; no bias so an all-zero conditioning input contributes exactly nothing
        self.cond_proj = Linear(rng, cfg.vocab_size, cfg.d_model, bias=False)

    def ctc_log_probs(self, x_norm: Tensor) -> Tensor:
        return F.log_softmax(self.ctc_head(x_norm), axis=-1)

    def __call__(self, features: Tensor, lengths, hook: Optional[FeedbackHook] = None,
                 self_condition: bool = True, rng: Optional[np.random.Generator] = None) -> EncoderOutput:
        """features: [B, T_raw, F] (zero padded); lengths: valid raw frames per row.

        With ``self_condition=False`` taps still emit predictions but the next
        layer receives only the normalised output (no projection term).
        """
        if not isinstance(features, Tensor):
            features = Tensor(features)
        if features.ndim != 3 or features.shape[-1] != self.cfg.input_dim:
            raise ShapeError(f"expected features [B, T, {self.cfg.input_dim}], got {features.shape}")
        x, lens = self.frontend(features, np.asarray(lengths))
        t = x.shape[1]
        if t > self.cfg.max_frames:
            raise ShapeError(f"{t} subsampled frames exceed the position table ({self.cfg.max_frames})")
        x = x + self.pos(np.arange(t))
        key_mask = padding_mask(lens, t, x.dtype)
        frame_mask = (np.arange(t)[None, :] < lens[:, None]).astype(x.dtype)[:, :, None]
        taps = set(self.cfg.taps)
        inters: list[IntermediatePrediction] = []
        for layer, block in enumerate(self.blocks, start=1):
            x = block(x, key_mask, frame_mask, rng)
            if layer in taps:
                x_norm = self.after_norm(x)
                pred = IntermediatePrediction(layer, self.ctc_log_probs(x_norm), x_norm, lens)
                inters.append(pred)
                if self_condition:
                    z = F.exp(pred.log_probs)
                    aug = hook(pred) if hook is not None else None
                    if aug is not None:
                        # fed-back mass is a constant: gradients flow through Z only
                        z = z + (np.asarray(aug, dtype=z.dtype) - z.data)
                    x = x_norm + self.cond_proj(z)
                else:
                    x = x_norm
        x_final = self.after_norm(x)
        return EncoderOutput(x_final, self.ctc_log_probs(x_final), lens, inters)
