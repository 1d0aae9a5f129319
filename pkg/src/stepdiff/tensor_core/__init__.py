"""Minimal float64 tensor + reverse-mode substrate used by every learned component."""
from .tensor import (Tape, Tensor, ConfigurationError, DimensionError, UsageError,
                     attention_forward, backward, dense_forward, layer_norm, softmax)
from .optim import ParamStore, adam_step
from . import checkpoint, nn, tensor

__all__ = ["Tape", "Tensor", "ConfigurationError", "DimensionError", "UsageError",
           "attention_forward", "backward", "dense_forward", "layer_norm", "softmax",
           "ParamStore", "adam_step", "checkpoint", "nn", "tensor"]
