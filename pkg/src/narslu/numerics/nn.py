"""Parameter containers and the generic layers the models are built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


def parameter(data: np.ndarray, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Module:
    """Tree of named parameters.

    Attributes holding a Tensor with ``requires_grad`` are parameters,
    attributes holding a Module (or a list of Modules) are children. Names
    are dotted paths in attribute-definition order.
    """

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(xavier(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, num: int, dim: int):
        self.weight = parameter(rng.normal(0.0, dim ** -0.5, size=(num, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return F.embedding(self.weight, ids)


class FeedForward(Module):
    """Position-wise Linear -> activation -> Linear."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, activation: str = "silu",
                 dropout: float = 0.0):
        self.w1 = Linear(rng, dim, hidden)
        self.w2 = Linear(rng, hidden, dim)
        self.activation = activation
        self.dropout = dropout

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = self.w1(x)
        h = F.silu(h) if self.activation == "silu" else F.relu(h)
        h = F.dropout(h, self.dropout, rng, self.training)
        return self.w2(h)


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention with additive masks."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, dropout: float = 0.0):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.dropout = dropout

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return F.transpose(F.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, mask: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        """query: [B, Tq, D]; memory: [B, Tk, D]; mask broadcastable to [B, H, Tq, Tk]."""
        b, tq, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        ctx = F.scaled_dot_product_attention(q, k, v, mask)
        ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return F.dropout(self.out(ctx), self.dropout, rng, self.training)


def padding_mask(lengths, max_len: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Additive key mask [B, 1, 1, T]: 0 for valid keys, -inf for padding."""
    lengths = np.asarray(lengths)
    valid = np.arange(max_len)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, -np.inf).astype(dtype)[:, None, None, :]


def causal_mask(length: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Additive [1, 1, T, T] mask blocking attention to future positions."""
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(upper, -np.inf, 0.0).astype(dtype)[None, None]
