"""Federated round engine: broadcast, proximal local updates, aggregation.

Round order within round t: the server first refreshes the emulator against
the reference block (using the adapter aggregated at t-1), then broadcasts a
frozen snapshot; clients independently run K proximal steps on their adapter
copies; the server averages the returned factors by exact data-fraction
weights. Client optimizer state is round-local; the server's alignment
optimizer persists across rounds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tape
from .align import AlignConfig, align_emulator
from .data import Sample, next_token_batch
from .errors import AggregationError, ConfigError
from .model import (LoraSet, SplitPlan, TransformerStack, assemble, extract,
                    extract_both_ends, reconstruct)
from .optim import AdamW

MODES = ("fedbiot", "fedot", "offsite_single")


@dataclass(frozen=True)
class RoundConfig:
    n_clients: int = 4             # M, full participation
    local_updates: int = 30        # K
    batch_size: int = 10
    rounds: int = 500              # R
    prox_eps: float = 0.1          # pull toward the broadcast adapter
    lr: float = 1e-3
    mode: str = "fedbiot"
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; known: {MODES}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.local_updates < 0 or self.rounds < 0:
            raise ConfigError("local_updates and rounds must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.prox_eps < 0:
            raise ConfigError(f"prox_eps must be >= 0, got {self.prox_eps}")


@dataclass
class ClientState:
    client_id: int
    shard: list[Sample]
    weight: Fraction
    lora: LoraSet | None = None


@dataclass(frozen=True)
class BroadcastSnapshot:
    """Frozen copies shipped to clients at the start of a round."""
    round_index: int
    adapter_lora: LoraSet
    emulator_lora: LoraSet


def plan_for_mode(mode: str, n_layers: int, adapter_size: int, keep_ratio) -> SplitPlan:
    """FedBiOT keeps the adapter at the output; the offsite baselines split
    it across both ends of the stack."""
    if mode == "fedbiot":
        return extract(n_layers, adapter_size, keep_ratio)
    return extract_both_ends(n_layers, adapter_size, keep_ratio)


def _anchor_deltas(snapshot_adapter: LoraSet) -> dict[tuple[int, str], np.ndarray]:
    """Effective weight deltas of the broadcast adapter, one per factor pair."""
    s = snapshot_adapter.scaling
    return {key: s * (b.values @ a.values)
            for key, (a, b) in snapshot_adapter.entries.items()}


def client_objective(plan: SplitPlan, stack: TransformerStack, adapter_lora: LoraSet,
                     emulator_lora: LoraSet, batch: list[Sample],
                     anchors: dict[tuple[int, str], np.ndarray] | None,
                     prox_eps: float) -> Array:
    """Batch-mean masked next-token loss through the emulator assembly, plus
    (eps/2) * squared distance between reconstructed adapter deltas and the
    broadcast anchors. Differentiable in the adapter factors only."""
    model = assemble(plan, stack, adapter_lora, emulator_lora, "adapemu")
    total = None
    for sample in batch:
        tokens, targets, loss_mask = next_token_batch(sample)
        term = ad.softmax_cross_entropy(model.logits(tokens), targets, loss_mask)
        total = term if total is None else ad.add(total, term)
    loss = ad.scale(total, 1.0 / len(batch))
    if prox_eps > 0.0:
        if anchors is None:
            raise ConfigError("prox_eps > 0 requires broadcast anchors")
        prox = None
        scaling = adapter_lora.scaling
        for key in adapter_lora.ordered_keys():
            a, b = adapter_lora.entries[key]
            delta = ad.scale(ad.matmul(b, a), scaling)
            anchor = Array(anchors[key].astype(delta.dtype, copy=False))
            term = ad.l2_distance_sq(delta, anchor)
            prox = term if prox is None else ad.add(prox, term)
        loss = ad.add(loss, ad.scale(prox, 0.5 * prox_eps))
    return loss


def local_update(client: ClientState, snapshot: BroadcastSnapshot, plan: SplitPlan,
                 stack: TransformerStack, cfg: RoundConfig, seed: int) -> list[float]:
    """K proximal steps from the broadcast adapter; returns per-step losses.

    The client re-initializes from the snapshot (its previous local state is
    discarded) and never touches the emulator factors.
    """
    client.lora = snapshot.adapter_lora.copy()
    client.lora.set_trainable(True)
    emulator = snapshot.emulator_lora
    emulator.set_trainable(False)
    anchors = _anchor_deltas(snapshot.adapter_lora) if cfg.prox_eps > 0 else None
    opt = AdamW(client.lora.parameters(), cfg.lr, cfg.betas, cfg.adam_eps,
                cfg.weight_decay)
    rng = np.random.default_rng(
        np.random.SeedSequence([41, seed, snapshot.round_index, client.client_id]))
    losses: list[float] = []
    for _ in range(cfg.local_updates):
        idx = rng.integers(0, len(client.shard), size=min(cfg.batch_size, len(client.shard)))
        batch = [client.shard[int(i)] for i in idx]
        opt.zero_grad()
        with Tape() as tape:
            loss = client_objective(plan, stack, client.lora, emulator, batch,
                                    anchors, cfg.prox_eps)
            tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    client.lora.set_trainable(False)
    return losses


def aggregate(loras: list[LoraSet], weights: list[Fraction]) -> LoraSet:
    """Factor-wise weighted average; weights must sum to 1 exactly."""
    if not loras:
        raise AggregationError("nothing to aggregate")
    if len(loras) != len(weights):
        raise AggregationError(f"{len(loras)} LoRA sets vs {len(weights)} weights")
    if sum(weights) != 1:
        raise AggregationError(f"client weights sum to {sum(weights)}, expected 1")
    first = loras[0]
    keys = first.ordered_keys()
    for i, other in enumerate(loras[1:], start=1):
        if other.ordered_keys() != keys or other.rank != first.rank \
                or other.alpha != first.alpha or other.targets != first.targets:
            raise AggregationError(f"client {i} LoRA structure differs from client 0")
        for key in keys:
            fa, fb = first.entries[key]
            oa, ob = other.entries[key]
            if oa.shape != fa.shape or ob.shape != fb.shape:
                raise AggregationError(
                    f"client {i} layer {key[0]} proj {key[1]} shape mismatch")
    out = first.copy()
    for key in keys:
        a_sum = None
        b_sum = None
        for lora, w in zip(loras, weights):
            wa = float(w)
            a, b = lora.entries[key]
            a_term = wa * a.values
            b_term = wa * b.values
            a_sum = a_term if a_sum is None else a_sum + a_term
            b_sum = b_term if b_sum is None else b_sum + b_term
        oa, ob = out.entries[key]
        oa.assign_(a_sum.astype(oa.dtype, copy=False))
        ob.assign_(b_sum.astype(ob.dtype, copy=False))
    return out


@dataclass
class RoundReport:
    round_index: int
    client_losses: list[float]          # final local loss per client
    client_traces: list[list[float]]
    align_trace: list[float]
    adapter_norm: float
    wall_time_s: float


@dataclass
class ServerState:
    plan: SplitPlan
    stack: TransformerStack
    adapter_lora: LoraSet
    emulator_lora: LoraSet
    align_optimizer: AdamW | None = None
    align_cfg: AlignConfig = field(default_factory=AlignConfig)


def run_round(server: ServerState, clients: list[ClientState], public_data: list[Sample],
              cfg: RoundConfig, round_index: int, seed: int) -> RoundReport:
    """One federated round; see module docstring for the phase order."""
    t0 = time.perf_counter()
    align_trace: list[float] = []
    if cfg.mode == "fedbiot" and server.align_cfg.round_iters > 0:
        align_trace, server.align_optimizer = align_emulator(
            server.plan, server.stack, server.emulator_lora, server.adapter_lora,
            public_data, server.align_cfg, server.align_cfg.round_iters,
            seed=_mix(seed, round_index), optimizer=server.align_optimizer)
    snapshot = BroadcastSnapshot(round_index, server.adapter_lora.copy(),
                                 server.emulator_lora)
    traces = []
    for client in sorted(clients, key=lambda c: c.client_id):
        traces.append(local_update(client, snapshot, server.plan, server.stack, cfg, seed))
    ordered = sorted(clients, key=lambda c: c.client_id)
    server.adapter_lora = aggregate([c.lora for c in ordered],
                                    [c.weight for c in ordered])
    norm = float(np.linalg.norm(reconstruct(server.adapter_lora)))
    return RoundReport(
        round_index=round_index,
        client_losses=[t[-1] if t else float("nan") for t in traces],
        client_traces=traces,
        align_trace=align_trace,
        adapter_norm=norm,
        wall_time_s=time.perf_counter() - t0,
    )


def _mix(seed: int, round_index: int) -> int:
    # round -1 is pre-alignment; keep the result non-negative for SeedSequence
    return seed * 100003 + round_index + 1


def pre_align(server: ServerState, public_data: list[Sample], seed: int) -> list[float]:
    """Initial distillation with the (zero-delta) starting adapter."""
    iters = server.align_cfg.pre_align_iters
    trace, server.align_optimizer = align_emulator(
        server.plan, server.stack, server.emulator_lora, server.adapter_lora,
        public_data, server.align_cfg, iters, seed=_mix(seed, -1),
        optimizer=server.align_optimizer)
    return trace


def run_training(server: ServerState, clients: list[ClientState],
                 public_data: list[Sample], cfg: RoundConfig, seed: int,
                 start_round: int = 0, on_round=None) -> list[RoundReport]:
    """Rounds start_round+1 .. rounds; pre-alignment is the caller's job
    (it owns checkpointing). on_round(report) fires after each round."""
    if cfg.mode == "offsite_single" and len(clients) != 1:
        raise ConfigError("offsite_single mode expects exactly one client")
    reports = []
    for t in range(start_round + 1, cfg.rounds + 1):
        report = run_round(server, clients, public_data, cfg, t, seed)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return reports
