"""Desk-scale simulator for split fine-tuning of a decoder-only LM with a
compressed, distillation-aligned emulator and federated low-rank adapters."""

from .autodiff import Array, Tape
from .model import (LoraSet, ModelConfig, SplitPlan, TransformerStack, assemble,
                    extract, extract_both_ends, inject_lora, reconstruct)
from .runconfig import RunConfig, build_config

__version__ = "0.1.0"

__all__ = [
    "Array",
    "Tape",
    "LoraSet",
    "ModelConfig",
    "SplitPlan",
    "TransformerStack",
    "assemble",
    "extract",
    "extract_both_ends",
    "inject_lora",
    "reconstruct",
    "RunConfig",
    "build_config",
    "__version__",
]
