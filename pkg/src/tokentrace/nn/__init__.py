"""Tensor autograd core, causal transformer, low-rank adapters, checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .lora import LoraModel, attach_lora, merge_lora, params_hash
from .tensor import Tensor, parameter
from .transformer import Transformer, TransformerConfig

__all__ = [
    "Tensor",
    "parameter",
    "Transformer",
    "TransformerConfig",
    "LoraModel",
    "attach_lora",
    "merge_lora",
    "params_hash",
    "save_checkpoint",
    "load_checkpoint",
]
