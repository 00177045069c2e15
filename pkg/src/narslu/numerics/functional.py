"""Differentiable primitives.

Each function takes Tensors (or plain arrays/scalars, treated as constants)
and returns a Tensor. Backward closures return one gradient per parent, in
parent order, or None for parents that need none.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import NumericError, ShapeError, Tensor, make_node


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return make_node(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the Swish activation."""
    xd = x.data
    s = 0.5 * (np.tanh(0.5 * xd) + 1.0)
    return make_node(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half * sigmoid(second half) along ``axis``."""
    a, b = np.split(x.data, 2, axis=axis)
    s = 0.5 * (np.tanh(0.5 * b) + 1.0)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return make_node(a * s, (x,), bw, "glu")


# ------------------------------------------------------------------ reductions
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------- structure
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return make_node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(x.data[index], (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                     lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take_along_last(x: Tensor, index: np.ndarray) -> Tensor:
    """out[..., ] = x[..., index[...]] picking one entry of the last axis."""
    idx = np.asarray(index)[..., None]
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return make_node(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw, "take_along_last")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    shape, dtype = weight.shape, weight.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return make_node(weight.data[ids], (weight,), bw, "embedding")


def scatter_add(src: Tensor, positions: Sequence[int], length: int) -> Tensor:
    """out[positions[n]] += src[n] into a zero tensor with ``length`` rows."""
    pos = np.asarray(positions, dtype=np.int64)
    if src.shape[0] != len(pos):
        raise ShapeError(f"scatter_add: {src.shape[0]} rows vs {len(pos)} positions")
    if len(pos) and (pos.min() < 0 or pos.max() >= length):
        raise ShapeError(f"scatter_add: positions out of range for length {length}")
    out = np.zeros((length,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, pos, src.data)
    return make_node(out, (src,), lambda g: (g[pos],), "scatter_add")


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")

    def bw(g):
        if bd.ndim == 2 and ad.ndim > 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_node(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias with weight stored as [in, out]."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ------------------------------------------------------------- normalisation
def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name}: non-finite input")


def log_softmax(x: Tensor, axis: int = -1, check: bool = True) -> Tensor:
    xd = x.data
    if check:
        _check_finite(xd, "log_softmax")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax tolerating -inf entries (masked attention scores)."""
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    d = xd.shape[-1]
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g
        return gx, ggain.reshape(d), gbias.reshape(d)

    return make_node(out.astype(xd.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


# ---------------------------------------------------------------- convolutions
def _frames(x: np.ndarray, kernel: int, stride: int, pad: tuple[int, int]) -> np.ndarray:
    """[B, T, C] -> [B, T_out, K, C] sliding windows over time."""
    if pad != (0, 0):
        x = np.pad(x, ((0, 0), pad, (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=1)  # [B, T', C, K]
    return np.swapaxes(win[:, ::stride], -1, -2)


def _unframe(g: np.ndarray, t_in: int, kernel: int, stride: int, pad: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_frames`: [B, T_out, K, C] -> [B, T, C]."""
    b, t_out, _, c = g.shape
    full = np.zeros((b, t_in + pad[0] + pad[1], c), dtype=g.dtype)
    for k in range(kernel):
        full[:, k:k + stride * (t_out - 1) + 1:stride] += g[:, :, k]
    return full[:, pad[0]:pad[0] + t_in]


def conv1d_out_len(length: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    return (length + pad[0] + pad[1] - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
           pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Time convolution. x: [B, T, C_in]; weight: [K, C_in, C_out]."""
    k, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d: input channels {x.shape} vs weight {weight.shape}")
    t_in = x.shape[1]
    if conv1d_out_len(t_in, k, stride, pad) < 1:
        raise ShapeError(f"conv1d: input length {t_in} too short for kernel {k}")
    fr = _frames(x.data, k, stride, pad)  # [B, T', K, C]
    b, t_out = fr.shape[:2]
    cols = fr.reshape(b * t_out, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = (cols @ w2).reshape(b, t_out, cout)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(b * t_out, cout)
        gw = (cols.T @ g2).reshape(k, cin, cout)
        gx = _unframe((g2 @ w2.T).reshape(b, t_out, k, cin), t_in, k, stride, pad)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bw, "conv1d")


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Per-channel 'same' convolution over time. x: [B, T, C]; weight: [K, C] (K odd)."""
    k, c = weight.shape
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv1d: kernel size must be odd, got {k}")
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d: channels {x.shape} vs weight {weight.shape}")
    pad = (k // 2, k // 2)
    t_in = x.shape[1]
    fr = _frames(x.data, k, 1, pad)  # [B, T, K, C]
    wd = weight.data
    out = np.einsum("btkc,kc->btc", fr, wd)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gw = np.einsum("btkc,btc->kc", fr, g)
        gx = _unframe(g[:, :, None, :] * wd, t_in, k, 1, pad)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bw, "depthwise_conv1d")


# ------------------------------------------------------------------ attention
def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is additive (0 where allowed, -inf where blocked) and must
    broadcast against the score shape [..., T_q, T_k].
    """
    d = q.shape[-1]
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    if mask is not None:
        scores = add(scores, np.asarray(mask, dtype=scores.dtype))
    return matmul(softmax(scores, axis=-1), v)
