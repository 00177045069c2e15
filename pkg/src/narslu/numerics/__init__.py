"""Minimal dense tensors with reverse-mode differentiation."""

from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import layer_norm, log_softmax, matmul
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .optim import Adam, AdamState, adam_step
from .tensor import (ComputationGraph, GradientError, NumericError, ShapeError, Tensor,
                     backward, is_grad_enabled, no_grad)

__all__ = [
    "Adam", "AdamState", "CheckpointError", "ComputationGraph", "Embedding", "FeedForward",
    "GradientError", "LayerNorm", "Linear", "Module", "MultiHeadAttention", "NumericError",
    "ShapeError", "Tensor", "adam_step", "backward", "functional", "is_grad_enabled",
    "layer_norm", "load_checkpoint", "log_softmax", "matmul", "no_grad", "save_checkpoint",
]
