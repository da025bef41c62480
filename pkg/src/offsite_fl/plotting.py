"""Loss-curve rendering for the report path: columnar text plus a figure."""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ConfigError

PLOT_COLUMNS = ("round", "client_loss_mean", "client_loss_min", "client_loss_max",
                "align_loss_mean", "adapter_norm")


def read_metrics(path: Path) -> tuple[list[dict], list[float]]:
    """(round records, pre-alignment trace) from a metrics file."""
    rounds: list[dict] = []
    prealign: list[float] = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{ln}: bad metrics record ({exc})") from exc
        if rec.get("kind") == "prealign":
            prealign = [float(x) for x in rec.get("losses", [])]
        elif rec.get("kind") == "round":
            rounds.append(rec)
    return rounds, prealign


def plot_table(rounds: list[dict]) -> list[tuple]:
    rows = []
    for rec in rounds:
        losses = [float(x) for x in rec["client_losses"]]
        trace = [float(x) for x in rec.get("align_trace", [])]
        align_mean = sum(trace) / len(trace) if trace else math.nan
        rows.append((
            int(rec["round"]),
            sum(losses) / len(losses),
            min(losses),
            max(losses),
            align_mean,
            float(rec["adapter_norm"]),
        ))
    return rows


def write_plot_data(rows: list[tuple], path: Path) -> None:
    lines = ["\t".join(PLOT_COLUMNS)]
    for row in rows:
        lines.append("\t".join(
            str(v) if isinstance(v, int) else f"{v:.6g}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def render_curves(rows: list[tuple], prealign: list[float], path: Path) -> None:
    """Two-panel figure: per-round client loss band and server-side traces."""
    n_panels = 2 if (any(not math.isnan(r[4]) for r in rows) or prealign) else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5.0 * n_panels, 3.4))
    if n_panels == 1:
        axes = [axes]
    rnd = [r[0] for r in rows]
    mean = [r[1] for r in rows]
    lo = [r[2] for r in rows]
    hi = [r[3] for r in rows]
    ax = axes[0]
    ax.fill_between(rnd, lo, hi, alpha=0.25, linewidth=0, label="client min/max")
    ax.plot(rnd, mean, lw=1.5, label="client mean")
    ax.set_xlabel("round")
    ax.set_ylabel("local training loss")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title("client fine-tuning")
    if n_panels == 2:
        ax = axes[1]
        if prealign:
            ax.plot(range(-len(prealign), 0), prealign, lw=1.0, alpha=0.7,
                    label="pre-alignment")
        align = [(r[0], r[4]) for r in rows if not math.isnan(r[4])]
        if align:
            ax.plot([a[0] for a in align], [a[1] for a in align], lw=1.5,
                    label="round alignment")
        ax.set_xlabel("round (negative = pre-alignment iters)")
        ax.set_ylabel("alignment loss")
        ax.legend(frameon=False, fontsize=8)
        ax.set_title("emulator distillation")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
