"""Closed-form resource accounting for a split configuration.

Communication counts low-rank factors only, at 4 bytes per parameter on the
wire and 10^6 bytes per MB. FLOP estimates use the standard dense-layer
model: forward = 2 * (dense params on the executed layer path), backward =
4 * (dense params on the path gradients traverse); embeddings and the output
head are excluded, so a plan with no layers costs zero. Exact FLOP values
are estimates; only comparisons between configurations are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import PROJECTION_DIMS, ModelConfig, SplitPlan

BYTES_PER_PARAM = 4          # factors travel as 32-bit floats
BYTES_PER_MB = 10**6

METHODS = ("fedbiot", "fedot", "offsite_single")


def lora_params_per_layer(cfg: ModelConfig, rank: int,
                          targets: tuple[str, ...] = ("q", "v")) -> int:
    """sum over targets of r * (d_in + d_out)."""
    total = 0
    for t in targets:
        if t not in PROJECTION_DIMS:
            raise ConfigError(f"unknown LoRA target {t!r}")
        d_in, d_out = cfg.proj_shape(t)
        total += rank * (d_in + d_out)
    return total


def dense_params_per_layer(cfg: ModelConfig) -> int:
    """Attention (4 d^2) plus gated feed-forward (3 d d_ff) projections."""
    return 4 * cfg.d_model * cfg.d_model + 3 * cfg.d_model * cfg.d_ff


def count_trainable(plan: SplitPlan, cfg: ModelConfig, rank: int,
                    targets: tuple[str, ...] = ("q", "v"),
                    scope: str = "client") -> int:
    """LoRA parameters optimized on one side of the split."""
    per_layer = lora_params_per_layer(cfg, rank, targets)
    if scope == "client":
        return len(plan.adapter_indices) * per_layer
    if scope == "server":
        return len(plan.emulator_indices) * per_layer
    raise ConfigError(f"unknown scope {scope!r}")


def comm_per_round(plan: SplitPlan, cfg: ModelConfig, rank: int, method: str,
                   targets: tuple[str, ...] = ("q", "v")) -> tuple[int, int]:
    """(download, upload) bytes per client per round.

    The bi-level method ships adapter + emulator factors down and adapter
    factors up; the offsite baselines exchange adapter factors both ways.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; known: {METHODS}")
    per_layer = lora_params_per_layer(cfg, rank, targets)
    up = len(plan.adapter_indices) * per_layer * BYTES_PER_PARAM
    if method == "fedbiot":
        down = (len(plan.adapter_indices) + len(plan.emulator_indices)) \
            * per_layer * BYTES_PER_PARAM
    else:
        down = up
    return down, up


def flop_per_token(plan: SplitPlan, cfg: ModelConfig, method: str) -> tuple[int, int]:
    """(forward, backward) FLOPs per token for one client-side update."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; known: {METHODS}")
    per_layer = dense_params_per_layer(cfg)
    loaded = len(plan.emulator_indices) + len(plan.adapter_indices)
    grad_path = len(plan.adapter_indices) if method == "fedbiot" else loaded
    return 2 * per_layer * loaded, 4 * per_layer * grad_path


@dataclass(frozen=True)
class CostReport:
    method: str
    adapter_size: int
    keep_ratio: str
    n_adapter_layers: int
    n_emulator_layers: int
    trainable_params: int
    comm_down_bytes: int
    comm_up_bytes: int
    flop_forward: int
    flop_backward: int

    @property
    def comm_total_mb(self) -> float:
        return (self.comm_down_bytes + self.comm_up_bytes) / BYTES_PER_MB

    @property
    def gflop_per_token(self) -> float:
        return (self.flop_forward + self.flop_backward) / 1e9


def cost_report(plan: SplitPlan, cfg: ModelConfig, rank: int, method: str,
                targets: tuple[str, ...] = ("q", "v")) -> CostReport:
    down, up = comm_per_round(plan, cfg, rank, method, targets)
    fwd, bwd = flop_per_token(plan, cfg, method)
    return CostReport(
        method=method,
        adapter_size=plan.adapter_size,
        keep_ratio=str(plan.keep_ratio),
        n_adapter_layers=len(plan.adapter_indices),
        n_emulator_layers=len(plan.emulator_indices),
        trainable_params=count_trainable(plan, cfg, rank, targets, "client"),
        comm_down_bytes=down,
        comm_up_bytes=up,
        flop_forward=fwd,
        flop_backward=bwd,
    )


COLUMNS = ("method", "adapter_layers", "emulator_layers", "trainable_M",
           "gflop_per_token", "comm_mb")


def report_row(r: CostReport) -> tuple[str, ...]:
    return (
        f"{r.method}(s={r.adapter_size},keep={r.keep_ratio})",
        str(r.n_adapter_layers),
        str(r.n_emulator_layers),
        f"{r.trainable_params / 1e6:.3f}",
        f"{r.gflop_per_token:.2f}",
        f"{r.comm_total_mb:.2f}",
    )


def format_table(reports: list[CostReport]) -> str:
    rows = [COLUMNS] + [report_row(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(COLUMNS))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(COLUMNS))))
    return "\n".join(lines)


def format_tsv(reports: list[CostReport]) -> str:
    lines = ["\t".join(COLUMNS)]
    for r in reports:
        lines.append("\t".join(report_row(r)))
    return "\n".join(lines) + "\n"
