"""Run orchestration: config -> live objects, training loop, persistence.

A run directory is self-describing: it holds the config snapshot, the
line-delimited metrics and timings files, periodic round checkpoints for
resumption, and the two final assembled-model artifacts. Re-running the
same snapshot reproduces every file byte for byte (timings excepted).
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (PartitionSpec, Sample, client_weights, generate_mixture,
                   partition, seed_entropy)
from .errors import ConfigError, IntegrityError
from .evaluate import dataset_loss, exact_match_rate
from .fedcore import (ClientState, ServerState, plan_for_mode, pre_align,
                      run_training)
from .model import (AssembledModel, LoraSet, ModelConfig, SplitPlan,
                    TransformerStack, assemble, inject_lora)
from .optim import AdamW
from .runconfig import PretrainConfig, RunConfig, snapshot_text

NP_DTYPES = {"float32": np.float32, "float64": np.float64}

CKPT_PATTERN = re.compile(r"ckpt_round_(\d{5})\.ckpt$")


@dataclass
class Session:
    cfg: RunConfig
    stack: TransformerStack
    plan: SplitPlan
    server: ServerState
    clients: list[ClientState]
    public_data: list[Sample]
    eval_data: list[Sample]
    pretrain_trace: list[float] = field(default_factory=list)

    def assembled(self, variant: str) -> AssembledModel:
        emulator = self.server.emulator_lora if variant == "adapemu" else None
        return assemble(self.plan, self.stack, self.server.adapter_lora,
                        emulator, variant)


def eval_dataset(cfg: RunConfig) -> list[Sample]:
    """Held-out samples from the client task mixture (never used in training)."""
    return generate_mixture(cfg.data.client_tasks, cfg.data.eval_count,
                            (cfg.run.seed, 14), cfg.model.vocab_size)


def pretrain_stack(stack: TransformerStack, corpus: list[Sample],
                   cfg: PretrainConfig, seed) -> list[float]:
    """Next-token training of every stack weight; the stack freezes again on
    return. Runs before any split exists, so no LoRA is involved."""
    if not corpus:
        raise ConfigError("pretraining requires a non-empty corpus")
    weights = list(stack.named_weights().values())
    for arr in weights:
        arr.requires_grad = True
    opt = AdamW(weights, cfg.lr)
    schedule = [(i, None) for i in range(stack.cfg.n_layers)]
    rng = np.random.default_rng(np.random.SeedSequence([59] + seed_entropy(seed)))
    trace: list[float] = []
    for _ in range(cfg.iters):
        idx = rng.integers(0, len(corpus), size=min(cfg.batch_size, len(corpus)))
        opt.zero_grad()
        with Tape() as tape:
            total = None
            for i in idx:
                tokens = np.asarray(corpus[int(i)].tokens, dtype=np.int64)
                targets = np.concatenate([tokens[1:], np.zeros(1, np.int64)])
                mask = np.ones(len(tokens), dtype=np.int64)
                mask[-1] = 0  # every position supervises except the last
                logits = stack.head_logits(
                    stack.run_layers(stack.embed(tokens), schedule))
                term = ad.softmax_cross_entropy(logits, targets, mask)
                total = term if total is None else ad.add(total, term)
            loss = ad.scale(total, 1.0 / len(idx))
            tape.backward(loss)
        opt.step()
        trace.append(loss.item())
    for arr in weights:
        arr.requires_grad = False
        arr.zero_grad()
    return trace


def build_session(cfg: RunConfig) -> Session:
    dtype = NP_DTYPES[cfg.run.dtype]
    fed = cfg.federation
    stack = TransformerStack(cfg.model, dtype)
    pretrain_trace: list[float] = []
    if cfg.pretrain.iters > 0:
        corpus = generate_mixture(cfg.data.client_tasks, cfg.pretrain.corpus_count,
                                  (cfg.run.seed, 15), cfg.model.vocab_size)
        pretrain_trace = pretrain_stack(stack, corpus, cfg.pretrain, cfg.run.seed)
    plan = plan_for_mode(fed.mode, cfg.model.n_layers, cfg.split.adapter_size,
                         cfg.split.keep_ratio)
    adapter = inject_lora(cfg.model, plan.adapter_indices, cfg.lora.rank,
                          cfg.lora.alpha, (cfg.run.seed, 1), cfg.lora.targets, dtype)
    emulator = inject_lora(cfg.model, plan.emulator_indices, cfg.lora.rank,
                           cfg.lora.alpha, (cfg.run.seed, 2), cfg.lora.targets, dtype)
    train = generate_mixture(cfg.data.client_tasks, cfg.data.train_count,
                             (cfg.run.seed, 11), cfg.model.vocab_size)
    shards = partition(train, PartitionSpec(cfg.data.partition_scheme,
                                            fed.n_clients, (cfg.run.seed, 12)))
    weights = client_weights(shards)
    clients = [ClientState(i, shard, w) for i, (shard, w) in enumerate(zip(shards, weights))]
    public_kinds = cfg.data.client_tasks if cfg.data.public_overlap else cfg.data.public_tasks
    public = generate_mixture(public_kinds, cfg.data.public_count,
                              (cfg.run.seed, 13), cfg.model.vocab_size)
    server = ServerState(plan, stack, adapter, emulator, None, cfg.align)
    return Session(cfg, stack, plan, server, clients, public, eval_dataset(cfg),
                   pretrain_trace)


# ---------------------------------------------------------------------------
# named-record bridging for checkpoints


def stack_records(stack: TransformerStack) -> dict[str, np.ndarray]:
    return {f"base.{name}": arr.values for name, arr in stack.named_weights().items()}


def load_stack(stack: TransformerStack, arrays: dict[str, np.ndarray]) -> None:
    for name, arr in stack.named_weights().items():
        key = f"base.{name}"
        if key not in arrays:
            raise IntegrityError(f"checkpoint missing record {key}")
        arr.assign_(arrays[key].astype(stack.dtype, copy=False))


def lora_records(lora: LoraSet, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for li, t in lora.ordered_keys():
        a, b = lora.entries[(li, t)]
        out[f"{prefix}.{li}.{t}.a"] = a.values
        out[f"{prefix}.{li}.{t}.b"] = b.values
    return out


def load_lora(lora: LoraSet, arrays: dict[str, np.ndarray], prefix: str) -> None:
    from .autodiff import Array
    for li in lora.layer_indices:
        for t in lora.targets:
            ka, kb = f"{prefix}.{li}.{t}.a", f"{prefix}.{li}.{t}.b"
            if ka not in arrays or kb not in arrays:
                raise IntegrityError(f"checkpoint missing record {ka} or {kb}")
            lora.entries[(li, t)] = (
                Array(arrays[ka].astype(lora.dtype, copy=False)),
                Array(arrays[kb].astype(lora.dtype, copy=False)),
            )


def _lora_meta(lora: LoraSet) -> dict:
    return {"rank": lora.rank, "alpha": lora.alpha, "targets": list(lora.targets),
            "layer_indices": list(lora.layer_indices)}


def _model_meta(cfg: ModelConfig) -> dict:
    return {"n_layers": cfg.n_layers, "d_model": cfg.d_model, "n_heads": cfg.n_heads,
            "d_ff": cfg.d_ff, "vocab_size": cfg.vocab_size,
            "max_seq_len": cfg.max_seq_len, "rng_seed": cfg.rng_seed}


# ---------------------------------------------------------------------------
# artifacts (assembled models for evaluation)


def save_artifact(path: Path, session: Session, variant: str) -> None:
    arrays = dict(stack_records(session.stack))
    arrays.update(lora_records(session.server.adapter_lora, "adapter"))
    if variant == "adapemu":
        arrays.update(lora_records(session.server.emulator_lora, "emulator"))
    meta = {
        "variant": variant,
        "mode": session.cfg.federation.mode,
        "model": _model_meta(session.cfg.model),
        "adapter": _lora_meta(session.server.adapter_lora),
        "emulator": _lora_meta(session.server.emulator_lora) if variant == "adapemu" else None,
    }
    save_checkpoint(path, arrays, session.cfg.run.dtype, session.plan, meta)


def load_artifact(path: Path) -> AssembledModel:
    arrays, dtype, plan, meta = load_checkpoint(path)
    if plan is None or "variant" not in meta:
        raise IntegrityError(f"{path}: not an assembled-model artifact")
    mcfg = ModelConfig(**meta["model"])
    stack = TransformerStack(mcfg, NP_DTYPES[dtype])
    load_stack(stack, arrays)
    am = meta["adapter"]
    adapter = LoraSet(mcfg, am["layer_indices"], am["rank"], am["alpha"], 0,
                      tuple(am["targets"]), NP_DTYPES[dtype], _init=False)
    load_lora(adapter, arrays, "adapter")
    emulator = None
    if meta["variant"] == "adapemu":
        em = meta["emulator"]
        emulator = LoraSet(mcfg, em["layer_indices"], em["rank"], em["alpha"], 0,
                           tuple(em["targets"]), NP_DTYPES[dtype], _init=False)
        load_lora(emulator, arrays, "emulator")
    return assemble(plan, stack, adapter, emulator, meta["variant"])


# ---------------------------------------------------------------------------
# round checkpoints


def save_round_checkpoint(path: Path, session: Session, round_index: int) -> None:
    server = session.server
    arrays = dict(stack_records(session.stack))
    arrays.update(lora_records(server.adapter_lora, "adapter"))
    arrays.update(lora_records(server.emulator_lora, "emulator"))
    opt = server.align_optimizer
    opt_t = 0
    if opt is not None:
        for name, arr in opt.state_arrays().items():
            arrays[f"alignopt.{name}"] = arr
        opt_t = opt.t
    meta = {
        "round": round_index,
        "align_opt_t": opt_t,
        "mode": session.cfg.federation.mode,
        "model": _model_meta(session.cfg.model),
        "adapter": _lora_meta(server.adapter_lora),
        "emulator": _lora_meta(server.emulator_lora),
    }
    save_checkpoint(path, arrays, session.cfg.run.dtype, session.plan, meta)


def load_round_checkpoint(path: Path, session: Session) -> int:
    """Restore server state from a round checkpoint; returns its round index."""
    arrays, dtype, plan, meta = load_checkpoint(path)
    if dtype != session.cfg.run.dtype:
        raise IntegrityError(
            f"{path}: dtype {dtype} does not match run dtype {session.cfg.run.dtype}")
    if plan is None or plan != session.plan:
        raise IntegrityError(f"{path}: split plan does not match this configuration")
    if meta.get("mode") != session.cfg.federation.mode:
        raise IntegrityError(f"{path}: mode {meta.get('mode')!r} does not match")
    load_stack(session.stack, arrays)
    load_lora(session.server.adapter_lora, arrays, "adapter")
    load_lora(session.server.emulator_lora, arrays, "emulator")
    opt = AdamW(session.server.emulator_lora.parameters(), session.cfg.align.lr,
                session.cfg.align.betas, session.cfg.align.eps,
                session.cfg.align.weight_decay)
    opt_states = {name[len("alignopt."):]: arr for name, arr in arrays.items()
                  if name.startswith("alignopt.")}
    if opt_states:
        try:
            opt.load_state(opt_states, int(meta["align_opt_t"]))
        except KeyError as exc:
            raise IntegrityError(f"{path}: incomplete optimizer state ({exc})") from exc
    session.server.align_optimizer = opt
    return int(meta["round"])


def list_round_checkpoints(run_dir: Path) -> list[tuple[int, Path]]:
    out = []
    for p in run_dir.glob("ckpt_round_*.ckpt"):
        m = CKPT_PATTERN.search(p.name)
        if m:
            out.append((int(m.group(1)), p))
    return sorted(out)


def prune_checkpoints(run_dir: Path, keep: int, final_round: int) -> None:
    """Retain the newest `keep` periodic checkpoints plus the final round's."""
    entries = list_round_checkpoints(run_dir)
    periodic = [(r, p) for r, p in entries if r != final_round]
    excess = periodic[:-keep] if len(periodic) > keep else []
    for _, p in excess:
        p.unlink()


# ---------------------------------------------------------------------------
# the full training entry point


def _append_jsonl(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _truncate_metrics(path: Path, max_round: int) -> None:
    if not path.exists():
        return
    kept = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("kind") == "prealign" or rec.get("round", 0) <= max_round:
            kept.append(line)
    path.write_text("".join(k + "\n" for k in kept))


def train_run(cfg: RunConfig, run_dir: str | Path, prealign_only: bool = False,
              log=None) -> dict:
    """Execute (or resume) a full run inside run_dir; returns a summary."""
    log = log or (lambda msg: None)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snap_path = run_dir / "config.txt"
    snapshot = snapshot_text(cfg)
    if snap_path.exists():
        if snap_path.read_text() != snapshot:
            raise ConfigError(
                f"{run_dir} holds a different configuration; use a fresh directory")
    else:
        snap_path.write_text(snapshot)
    metrics_path = run_dir / "metrics.jsonl"
    timings_path = run_dir / "timings.jsonl"
    t_build = time.perf_counter()
    session = build_session(cfg)
    build_time = time.perf_counter() - t_build
    fed = cfg.federation
    if session.pretrain_trace:
        log(f"pretraining done ({len(session.pretrain_trace)} iters, "
            f"loss {session.pretrain_trace[-1]:.4f})")

    ckpts = list_round_checkpoints(run_dir)
    if ckpts:
        start_round = load_round_checkpoint(ckpts[-1][1], session)
        _truncate_metrics(metrics_path, start_round)
        log(f"resumed from {ckpts[-1][1].name} (round {start_round})")
    else:
        t0 = time.perf_counter()
        trace = pre_align(session.server, session.public_data, cfg.run.seed)
        metrics_path.write_text("")
        timings_path.write_text("")
        if session.pretrain_trace:
            _append_jsonl(metrics_path, {"kind": "pretrain",
                                         "iters": len(session.pretrain_trace),
                                         "losses": session.pretrain_trace})
            _append_jsonl(timings_path, {"phase": "pretrain",
                                         "wall_time_s": build_time})
        _append_jsonl(metrics_path, {"kind": "prealign", "iters": len(trace),
                                     "losses": trace})
        _append_jsonl(timings_path, {"phase": "prealign",
                                     "wall_time_s": time.perf_counter() - t0})
        start_round = 0
        save_round_checkpoint(run_dir / "ckpt_round_00000.ckpt", session, 0)
        last = trace[-1] if trace else float("nan")
        log(f"pre-alignment done ({len(trace)} iters, loss {last:.4f})")

    summary: dict = {"start_round": start_round, "rounds": fed.rounds,
                     "mode": fed.mode, "run_dir": str(run_dir)}
    if prealign_only or start_round >= fed.rounds:
        for variant in ("adapemu", "adapfu"):
            save_artifact(run_dir / f"model_{variant}.ckpt", session, variant)
        summary["rounds_completed"] = start_round
        return summary

    def on_round(report):
        _append_jsonl(metrics_path, {
            "kind": "round",
            "round": report.round_index,
            "client_losses": report.client_losses,
            "align_trace": report.align_trace,
            "adapter_norm": report.adapter_norm,
        })
        _append_jsonl(timings_path, {"round": report.round_index,
                                     "wall_time_s": report.wall_time_s})
        if report.round_index % cfg.run.checkpoint_every == 0 \
                or report.round_index == fed.rounds:
            path = run_dir / f"ckpt_round_{report.round_index:05d}.ckpt"
            save_round_checkpoint(path, session, report.round_index)
            prune_checkpoints(run_dir, cfg.run.keep_checkpoints, fed.rounds)
        mean = sum(report.client_losses) / len(report.client_losses)
        log(f"round {report.round_index}/{fed.rounds} "
            f"client loss {mean:.4f} adapter norm {report.adapter_norm:.4f}")

    reports = run_training(session.server, session.clients, session.public_data,
                           fed, cfg.run.seed, start_round=start_round,
                           on_round=on_round)
    for variant in ("adapemu", "adapfu"):
        save_artifact(run_dir / f"model_{variant}.ckpt", session, variant)
    summary["rounds_completed"] = fed.rounds
    if reports:
        summary["final_client_losses"] = reports[-1].client_losses
        summary["final_adapter_norm"] = reports[-1].adapter_norm
    return summary


def evaluate_artifact(path: Path, dataset: list[Sample]) -> dict:
    model = load_artifact(path)
    return {
        "variant": model.label,
        "loss": dataset_loss(model, dataset),
        "exact_match": exact_match_rate(model, dataset),
        "n_samples": len(dataset),
    }
