"""Toy decoder-only transformer, layer-split plans, and low-rank adapters.

Layer index 0 sits nearest the input embedding; index n-1 feeds the output
head. A split plan carves the stack into an adapter (kept verbatim on the
client side), a compressed emulator (an evenly spaced subset of the
remaining layers), and the non-compressed reference block those layers
stand in for.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .errors import ConfigError, InputError, ShapeError

PROJECTION_DIMS = {
    # name -> (d_in key, d_out key) resolved against ModelConfig
    "q": ("d_model", "d_model"),
    "k": ("d_model", "d_model"),
    "v": ("d_model", "d_model"),
    "o": ("d_model", "d_model"),
    "gate": ("d_model", "d_ff"),
    "up": ("d_model", "d_ff"),
    "down": ("d_ff", "d_model"),
}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 192
    vocab_size: int = 64
    max_seq_len: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ff,
               self.vocab_size, self.max_seq_len) < 1:
            raise ConfigError("model dimensions must all be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head dim must be even (rotary pairs)")

    def proj_shape(self, name: str) -> tuple[int, int]:
        """Stored weight shape (d_in, d_out) for a named projection."""
        din_key, dout_key = PROJECTION_DIMS[name]
        return (getattr(self, din_key), getattr(self, dout_key))


class DecoderLayer:
    """Pre-norm block: RMS-norm -> causal MHA with rotary q/k -> RMS-norm ->
    gated feed-forward. Weights are stored (d_in, d_out) so y = x @ W."""

    PROJS = ("q", "k", "v", "o", "gate", "up", "down")

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype):
        d, ff = cfg.d_model, cfg.d_ff
        self.cfg = cfg
        # residual-output projections scaled down to keep the stack stable
        res = 1.0 / np.sqrt(2.0 * cfg.n_layers)

        def w(d_in, d_out, gain=1.0):
            std = gain / np.sqrt(d_in)
            return Array(rng.normal(0.0, std, size=(d_in, d_out)), dtype=dtype)

        self.attn_norm = Array(np.ones(d), dtype=dtype)
        self.wq = w(d, d)
        self.wk = w(d, d)
        self.wv = w(d, d)
        self.wo = w(d, d, gain=res)
        self.ffn_norm = Array(np.ones(d), dtype=dtype)
        self.w_gate = w(d, ff)
        self.w_up = w(d, ff)
        self.w_down = w(ff, d, gain=res)

    def weights(self) -> dict[str, Array]:
        return {
            "attn_norm": self.attn_norm, "q": self.wq, "k": self.wk,
            "v": self.wv, "o": self.wo, "ffn_norm": self.ffn_norm,
            "gate": self.w_gate, "up": self.w_up, "down": self.w_down,
        }

    def _proj(self, x: Array, name: str, lora: "LayerLora | None") -> Array:
        w = {"q": self.wq, "k": self.wk, "v": self.wv, "o": self.wo,
             "gate": self.w_gate, "up": self.w_up, "down": self.w_down}[name]
        y = ad.matmul(x, w)
        if lora is not None and name in lora.pairs:
            a, b = lora.pairs[name]
            low = ad.matmul(ad.matmul(x, ad.transpose(a)), ad.transpose(b))
            y = ad.add(y, ad.scale(low, lora.scaling))
        return y

    def forward(self, x: Array, lora: "LayerLora | None" = None) -> Array:
        cfg = self.cfg
        h = ad.rms_norm(x, self.attn_norm)
        q = ad.rotary(self._proj(h, "q", lora), cfg.n_heads)
        k = ad.rotary(self._proj(h, "k", lora), cfg.n_heads)
        v = self._proj(h, "v", lora)
        attn = self._proj(ad.causal_attention(q, k, v, cfg.n_heads), "o", lora)
        x = ad.add(x, attn)
        h = ad.rms_norm(x, self.ffn_norm)
        ff = ad.mul(ad.silu(self._proj(h, "gate", lora)), self._proj(h, "up", lora))
        return ad.add(x, self._proj(ff, "down", lora))


class TransformerStack:
    """Embedding, n decoder layers, final norm, output head. All frozen."""

    def __init__(self, cfg: ModelConfig, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        root = np.random.SeedSequence(cfg.rng_seed)
        keys = root.spawn(cfg.n_layers + 2)
        emb_rng = np.random.default_rng(keys[0])
        self.embedding = Array(
            emb_rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_model)), dtype=self.dtype)
        self.layers = [DecoderLayer(cfg, np.random.default_rng(keys[1 + i]), self.dtype)
                       for i in range(cfg.n_layers)]
        head_rng = np.random.default_rng(keys[cfg.n_layers + 1])
        self.final_norm = Array(np.ones(cfg.d_model), dtype=self.dtype)
        self.head = Array(
            head_rng.normal(0.0, 1.0 / np.sqrt(cfg.d_model),
                            size=(cfg.d_model, cfg.vocab_size)), dtype=self.dtype)

    # ------------------------------------------------------------------ io

    def named_weights(self) -> dict[str, Array]:
        out = {"embedding": self.embedding, "final_norm": self.final_norm,
               "head": self.head}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.weights().items():
                out[f"layers.{i}.{name}"] = arr
        return out

    def embed(self, tokens) -> Array:
        tokens = np.asarray(tokens)
        if tokens.ndim != 1:
            raise ShapeError(f"token sequence must be 1-D, got {tokens.shape}")
        if tokens.shape[0] > self.cfg.max_seq_len:
            raise InputError(
                f"sequence length {tokens.shape[0]} exceeds max_seq_len={self.cfg.max_seq_len}")
        if tokens.shape[0] == 0:
            raise InputError("empty token sequence")
        return ad.embedding(self.embedding, tokens)

    def run_layers(self, x: Array, schedule: Iterable[tuple[int, "LayerLora | None"]]) -> Array:
        for idx, lora in schedule:
            x = self.layers[idx].forward(x, lora)
        return x

    def head_logits(self, x: Array) -> Array:
        return ad.matmul(ad.rms_norm(x, self.final_norm), self.head)


# ---------------------------------------------------------------------------
# split plans


@dataclass(frozen=True)
class SplitPlan:
    """Layer index sets for one compression configuration.

    emulator_indices: compressed stand-in layers (subset of noncompressed).
    noncompressed_indices: the block the emulator replaces.
    adapter_indices: layers the clients fine-tune; "output" placement puts
    them all after the block, "ends" placement splits them around it.
    """

    n_layers: int
    adapter_size: int
    keep_ratio: Fraction
    adapter_indices: tuple[int, ...]
    emulator_indices: tuple[int, ...]
    noncompressed_indices: tuple[int, ...]
    placement: str = "output"

    def __post_init__(self):
        a, e, nc = set(self.adapter_indices), set(self.emulator_indices), set(self.noncompressed_indices)
        if a & nc:
            raise ConfigError("adapter and emulator blocks overlap")
        if not e <= nc:
            raise ConfigError("emulator indices must lie inside the non-compressed block")
        if not (e and a):
            raise ConfigError("degenerate split: empty adapter or emulator")
        if min(e) != min(nc) or max(e) != max(nc):
            raise ConfigError("emulator must keep both endpoint layers of the block")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "adapter_size": self.adapter_size,
            "keep_ratio": [self.keep_ratio.numerator, self.keep_ratio.denominator],
            "adapter_indices": list(self.adapter_indices),
            "emulator_indices": list(self.emulator_indices),
            "noncompressed_indices": list(self.noncompressed_indices),
            "placement": self.placement,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "SplitPlan":
        return SplitPlan(
            n_layers=int(d["n_layers"]),
            adapter_size=int(d["adapter_size"]),
            keep_ratio=Fraction(int(d["keep_ratio"][0]), int(d["keep_ratio"][1])),
            adapter_indices=tuple(d["adapter_indices"]),
            emulator_indices=tuple(d["emulator_indices"]),
            noncompressed_indices=tuple(d["noncompressed_indices"]),
            placement=str(d["placement"]),
        )


def _stride_walk(block_size: int, keep_ratio: Fraction, offset: int) -> tuple[int, ...]:
    """Evenly spaced keep set over a block: floor(j * stride) for exact
    rational stride (block_size-1)/(n_keep-1), both endpoints always kept."""
    n_keep = int(keep_ratio * block_size)  # floor for a Fraction times int
    if n_keep < 2:
        raise ConfigError(
            f"keep_ratio={keep_ratio} keeps {n_keep} of {block_size} layers; need >= 2")
    if n_keep == block_size:
        return tuple(range(offset, offset + block_size))
    num, den = block_size - 1, n_keep - 1
    kept = tuple(offset + (j * num) // den for j in range(n_keep))
    return kept


def _check_split_args(n_layers: int, adapter_size: int, keep_ratio) -> Fraction:
    kr = Fraction(keep_ratio).limit_denominator(10**6) if isinstance(keep_ratio, float) \
        else Fraction(keep_ratio)
    if not 0 < kr <= 1:
        raise ConfigError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if not 1 <= adapter_size <= n_layers - 2:
        raise ConfigError(
            f"adapter_size={adapter_size} invalid for n_layers={n_layers}")
    return kr


def extract(n_layers: int, adapter_size: int, keep_ratio) -> SplitPlan:
    """Output-placement split: adapter = last s layers, emulator = stride walk
    over the first n-s. Pure function of its arguments."""
    kr = _check_split_args(n_layers, adapter_size, keep_ratio)
    block = n_layers - adapter_size
    return SplitPlan(
        n_layers=n_layers,
        adapter_size=adapter_size,
        keep_ratio=kr,
        adapter_indices=tuple(range(block, n_layers)),
        emulator_indices=_stride_walk(block, kr, 0),
        noncompressed_indices=tuple(range(block)),
        placement="output",
    )


def extract_both_ends(n_layers: int, adapter_size: int, keep_ratio) -> SplitPlan:
    """Ends-placement split used by the offsite/federated-offsite baselines:
    adapter = first s/2 and last s/2 layers, emulator over the middle."""
    kr = _check_split_args(n_layers, adapter_size, keep_ratio)
    if adapter_size % 2 != 0:
        raise ConfigError(f"ends placement needs an even adapter_size, got {adapter_size}")
    half = adapter_size // 2
    block = n_layers - adapter_size
    return SplitPlan(
        n_layers=n_layers,
        adapter_size=adapter_size,
        keep_ratio=kr,
        adapter_indices=tuple(range(half)) + tuple(range(n_layers - half, n_layers)),
        emulator_indices=_stride_walk(block, kr, half),
        noncompressed_indices=tuple(range(half, n_layers - half)),
        placement="ends",
    )


# ---------------------------------------------------------------------------
# low-rank adapters


@dataclass
class LayerLora:
    """Low-rank factors for one layer: pairs[name] = (A (r, d_in), B (d_out, r))."""

    pairs: dict[str, tuple[Array, Array]]
    scaling: float


class LoraSet:
    """Low-rank factor pairs for a set of layers, all sharing rank/alpha.

    A is Gaussian with std 1/sqrt(d_in); B starts at zero, so injection
    leaves the forward pass bitwise unchanged until training moves B.
    """

    def __init__(self, cfg: ModelConfig, layer_indices: Iterable[int], rank: int,
                 alpha: float, seed, targets: tuple[str, ...] = ("q", "v"),
                 dtype=np.float64, _init: bool = True):
        layer_indices = tuple(layer_indices)
        if len(set(layer_indices)) != len(layer_indices):
            raise ConfigError(f"duplicate layer in LoRA injection: {layer_indices}")
        for t in targets:
            if t not in PROJECTION_DIMS:
                raise ConfigError(f"unknown LoRA target projection {t!r}")
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        self.cfg = cfg
        self.layer_indices = layer_indices
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.seed = seed
        self.targets = tuple(targets)
        self.dtype = np.dtype(dtype)
        self.entries: dict[tuple[int, str], tuple[Array, Array]] = {}
        if not _init:
            return
        entropy = seed if isinstance(seed, (list, tuple)) else [seed]
        entropy = [int(x) & 0xFFFFFFFF for x in entropy]
        root = np.random.SeedSequence(entropy + [len(layer_indices)])
        keys = iter(root.spawn(len(layer_indices) * len(targets)))
        for li in layer_indices:
            for t in targets:
                d_in, d_out = cfg.proj_shape(t)
                rng = np.random.default_rng(next(keys))
                a = Array(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in)),
                          dtype=self.dtype)
                b = Array(np.zeros((d_out, rank)), dtype=self.dtype)
                self.entries[(li, t)] = (a, b)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def ordered_keys(self) -> list[tuple[int, str]]:
        """Canonical order: layer index ascending, then target tuple order."""
        order = {t: i for i, t in enumerate(self.targets)}
        return sorted(self.entries, key=lambda k: (k[0], order[k[1]]))

    def parameters(self) -> list[Array]:
        out = []
        for key in self.ordered_keys():
            a, b = self.entries[key]
            out.extend((a, b))
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def param_count(self) -> int:
        total = 0
        for (_, t) in self.entries:
            d_in, d_out = self.cfg.proj_shape(t)
            total += self.rank * (d_in + d_out)
        return total

    def layer_view(self, layer_idx: int) -> LayerLora | None:
        pairs = {t: self.entries[(layer_idx, t)] for t in self.targets
                 if (layer_idx, t) in self.entries}
        return LayerLora(pairs, self.scaling) if pairs else None

    def copy(self) -> "LoraSet":
        dup = LoraSet(self.cfg, self.layer_indices, self.rank, self.alpha,
                      self.seed, self.targets, self.dtype, _init=False)
        for key, (a, b) in self.entries.items():
            dup.entries[key] = (Array(a.values.copy()), Array(b.values.copy()))
        return dup

    def state_bytes(self) -> bytes:
        return b"".join(self.entries[k][i].values.tobytes()
                        for k in self.ordered_keys() for i in (0, 1))


def inject_lora(cfg: ModelConfig, layer_indices: Iterable[int], rank: int,
                alpha: float, seed, targets: tuple[str, ...] = ("q", "v"),
                dtype=np.float64) -> LoraSet:
    """Build a fresh LoRA set for the given layers (B zeroed, A scaled Gaussian)."""
    return LoraSet(cfg, layer_indices, rank, alpha, seed, targets, dtype=dtype)


def reconstruct(lora: LoraSet) -> np.ndarray:
    """Flatten the effective weight deltas (alpha/r) * B @ A in canonical order."""
    parts = []
    for li, t in lora.ordered_keys():
        a, b = lora.entries[(li, t)]
        parts.append((lora.scaling * (b.values @ a.values)).ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# assembled models


class AssembledModel:
    """A stack plus an execution schedule (layer order with per-layer LoRA)."""

    def __init__(self, stack: TransformerStack, schedule: list[tuple[int, LayerLora | None]],
                 label: str):
        self.stack = stack
        self.schedule = schedule
        self.label = label

    def hidden(self, tokens) -> Array:
        return self.stack.run_layers(self.stack.embed(tokens), self.schedule)

    def logits(self, tokens) -> Array:
        return self.stack.head_logits(self.hidden(tokens))


def _lora_for(lora: LoraSet | None, idx: int) -> LayerLora | None:
    return lora.layer_view(idx) if lora is not None else None


def _check_lora_layers(lora: LoraSet | None, indices: tuple[int, ...], role: str) -> None:
    if lora is None:
        return
    if set(lora.layer_indices) != set(indices):
        raise ConfigError(
            f"{role} LoRA covers layers {sorted(lora.layer_indices)}, plan expects {sorted(indices)}")


def assemble(plan: SplitPlan, stack: TransformerStack, adapter_lora: LoraSet | None,
             emulator_lora: LoraSet | None, variant: str) -> AssembledModel:
    """Build AdapEmu (compressed emulator + adapter) or AdapFu (full
    non-compressed block + adapter). Layers execute in index order."""
    if stack.cfg.n_layers != plan.n_layers:
        raise ConfigError(
            f"plan built for {plan.n_layers} layers, stack has {stack.cfg.n_layers}")
    _check_lora_layers(adapter_lora, plan.adapter_indices, "adapter")
    if variant == "adapemu":
        _check_lora_layers(emulator_lora, plan.emulator_indices, "emulator")
        body = [(i, _lora_for(emulator_lora, i)) for i in plan.emulator_indices]
    elif variant == "adapfu":
        body = [(i, None) for i in plan.noncompressed_indices]
    else:
        raise ConfigError(f"unknown assembly variant {variant!r}")
    schedule = body + [(i, _lora_for(adapter_lora, i)) for i in plan.adapter_indices]
    schedule.sort(key=lambda pair: pair[0])
    return AssembledModel(stack, schedule, variant)


def emulator_activations(plan: SplitPlan, stack: TransformerStack,
                         emulator_lora: LoraSet | None, tokens,
                         adapter_lora: LoraSet | None = None) -> tuple[Array, Array]:
    """Hidden states entering the post-block adapter, as a
    (compressed, non-compressed) pair.

    With "ends" placement the leading adapter half runs first (with its
    LoRA, when given) since it feeds the emulator.
    """
    _check_lora_layers(emulator_lora, plan.emulator_indices, "emulator")
    lead = [i for i in plan.adapter_indices if i < min(plan.noncompressed_indices)]
    lead_sched = [(i, _lora_for(adapter_lora, i)) for i in lead]
    comp_sched = lead_sched + [(i, _lora_for(emulator_lora, i)) for i in plan.emulator_indices]
    full_sched = lead_sched + [(i, None) for i in plan.noncompressed_indices]
    x = stack.embed(tokens)
    return stack.run_layers(x, comp_sched), stack.run_layers(x, full_sched)
