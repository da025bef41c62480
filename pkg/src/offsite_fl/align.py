"""Server-side emulator distillation against the non-compressed reference.

The loss ties the compressed emulator to the block it replaces in two
places: hidden states entering the adapter (squared distance, averaged over
masked positions and hidden dims) and full-model output distributions
(KL against the assembly that uses the non-compressed block, which is the
frozen reference side). Gradients reach only the emulator's low-rank
factors; the adapter factors and every base weight are constants here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tape
from .data import Sample
from .errors import ConfigError
from .model import LoraSet, SplitPlan, TransformerStack, emulator_activations
from .optim import AdamW


@dataclass(frozen=True)
class AlignConfig:
    lam: float = 1.0                # weight on the distribution term
    pre_align_iters: int = 500
    round_iters: int = 10
    batch_size: int = 10
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.pre_align_iters < 0 or self.round_iters < 0:
            raise ConfigError("alignment iteration counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("alignment batch_size must be >= 1")


def alignment_loss(plan: SplitPlan, stack: TransformerStack, emulator_lora: LoraSet,
                   adapter_lora: LoraSet | None, sample: Sample, lam: float) -> Array:
    """Distillation loss for one sample; differentiable in emulator_lora only.

    Both terms are restricted to the sample's ground-truth positions. The
    representation term is normalized per masked position and hidden dim.
    The reference side (non-compressed block, then the same adapter) is
    detached, so it contributes targets but no gradients.
    """
    mask = np.asarray(sample.gt_mask, dtype=np.int64)
    n_mask = int(mask.sum())
    d = stack.cfg.d_model
    h_emu, h_ref = emulator_activations(plan, stack, emulator_lora, sample.tokens,
                                        adapter_lora=adapter_lora)
    h_ref = Array(h_ref.values)  # detach: reference activations are constants
    repr_term = ad.scale(ad.l2_distance_sq(h_emu, h_ref, mask), 1.0 / (n_mask * d))
    if lam == 0.0:
        return repr_term
    tail = [i for i in plan.adapter_indices if i > max(plan.noncompressed_indices)]
    tail_sched = [(i, adapter_lora.layer_view(i) if adapter_lora else None) for i in tail]
    q_logits = stack.head_logits(stack.run_layers(h_emu, tail_sched))
    p_logits = stack.head_logits(stack.run_layers(h_ref, tail_sched))
    kd_term = ad.kl_divergence(Array(p_logits.values), q_logits, mask)
    return ad.add(repr_term, ad.scale(kd_term, lam))


def batch_alignment_loss(plan: SplitPlan, stack: TransformerStack, emulator_lora: LoraSet,
                         adapter_lora: LoraSet | None, batch: list[Sample],
                         lam: float) -> Array:
    total = None
    for sample in batch:
        term = alignment_loss(plan, stack, emulator_lora, adapter_lora, sample, lam)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(batch))


def align_emulator(plan: SplitPlan, stack: TransformerStack, emulator_lora: LoraSet,
                   adapter_lora: LoraSet | None, public_data: list[Sample],
                   cfg: AlignConfig, iters: int, seed: int,
                   optimizer: AdamW | None = None) -> tuple[list[float], AdamW]:
    """Run `iters` optimizer steps on the emulator factors; returns the loss
    trace and the (possibly reused) optimizer so moments persist across
    rounds on the server."""
    if not public_data and iters > 0:
        raise ConfigError("alignment requires a non-empty public dataset")
    if optimizer is None:
        optimizer = AdamW(emulator_lora.parameters(), cfg.lr, cfg.betas, cfg.eps,
                          cfg.weight_decay)
    if adapter_lora is not None:
        adapter_lora.set_trainable(False)
    emulator_lora.set_trainable(True)
    rng = np.random.default_rng(np.random.SeedSequence([23, seed]))
    trace: list[float] = []
    for _ in range(iters):
        idx = rng.integers(0, len(public_data), size=min(cfg.batch_size, len(public_data)))
        batch = [public_data[int(i)] for i in idx]
        optimizer.zero_grad()
        with Tape() as tape:
            loss = batch_alignment_loss(plan, stack, emulator_lora, adapter_lora,
                                        batch, cfg.lam)
            tape.backward(loss)
        optimizer.step()
        trace.append(loss.item())
    emulator_lora.set_trainable(False)
    return trace, optimizer
