"""Command-line interface.

Subcommands: extract | prealign | train | eval | cost | plot. Exit codes:
0 success, 1 configuration/validation problems, 2 runtime failures (missing
or damaged files). Output lands under --out when given, else under
$OFFSITE_FL_OUTPUT_ROOT/<run.name> (default root: ./runs).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .costs import cost_report, format_table, format_tsv
from .errors import ConfigError, IntegrityError
from .fedcore import plan_for_mode
from .model import extract, extract_both_ends
from .runconfig import RunConfig, build_config
from .session import eval_dataset, evaluate_artifact, train_run

OUTPUT_ROOT_ENV = "OFFSITE_FL_OUTPUT_ROOT"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract wants 1."""

    def error(self, message):
        raise ConfigError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", default=None,
                   help="config file of section.key = value lines")
    p.add_argument("-o", "--override", metavar="KEY=VALUE", action="append",
                   default=[], help="override one config key (repeatable)")


def _load_config(args) -> RunConfig:
    text = None
    source = "<defaults>"
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} does not exist")
        text = path.read_text()
        source = str(path)
    return build_config(text, args.override, source)


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / cfg.run.name


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="offsite-fl",
                     description="Simulate split fine-tuning with a compressed emulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[], help="print the layer split for a config")
    _add_config_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("prealign", help="run emulator pre-alignment only")
    _add_config_args(p)
    p.add_argument("--out", metavar="DIR", default=None, help="run directory")
    p.set_defaults(func=cmd_prealign)

    p = sub.add_parser("train", help="run (or resume) federated training")
    _add_config_args(p)
    p.add_argument("--out", metavar="DIR", default=None, help="run directory")
    p.add_argument("--quiet", action="store_true", help="suppress per-round lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained artifact on held-out data")
    p.add_argument("--run", metavar="DIR", required=True, help="run directory")
    p.add_argument("--split", choices=("adapemu", "adapfu"), default="adapemu",
                   help="which assembled model to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="print resource estimates for split configs")
    _add_config_args(p)
    p.add_argument("--tsv", metavar="FILE", default=None,
                   help="also write machine-readable rows here")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("plot", help="render loss curves from a run's metrics")
    p.add_argument("--run", metavar="DIR", required=True, help="run directory")
    p.set_defaults(func=cmd_plot)
    return parser


# ---------------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    plan = plan_for_mode(cfg.federation.mode, cfg.model.n_layers,
                         cfg.split.adapter_size, cfg.split.keep_ratio)
    print(f"mode: {cfg.federation.mode} (adapter placement: {plan.placement})")
    print(f"layers: {plan.n_layers}  adapter_size: {plan.adapter_size}  "
          f"keep_ratio: {plan.keep_ratio}")
    print(f"adapter ({len(plan.adapter_indices)}): "
          + " ".join(map(str, plan.adapter_indices)))
    print(f"emulator ({len(plan.emulator_indices)}): "
          + " ".join(map(str, plan.emulator_indices)))
    print(f"replaces ({len(plan.noncompressed_indices)}): "
          + " ".join(map(str, plan.noncompressed_indices)))
    return 0


def cmd_prealign(args) -> int:
    cfg = _load_config(args)
    summary = train_run(cfg, _run_dir(args, cfg), prealign_only=True, log=print)
    print(f"pre-aligned emulator saved under {summary['run_dir']}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    log = (lambda msg: None) if args.quiet else print
    summary = train_run(cfg, _run_dir(args, cfg), log=log)
    done = summary.get("rounds_completed", 0)
    print(f"completed {done}/{cfg.federation.rounds} rounds in {summary['run_dir']}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    snap = run_dir / "config.txt"
    if not snap.exists():
        raise FileNotFoundError(f"{run_dir} has no config snapshot")
    cfg = build_config(snap.read_text(), [], str(snap))
    artifact = run_dir / f"model_{args.split}.ckpt"
    if not artifact.exists():
        raise FileNotFoundError(f"missing artifact {artifact}; run train first")
    result = evaluate_artifact(artifact, eval_dataset(cfg))
    print(f"split: {result['variant']}")
    print(f"samples: {result['n_samples']}")
    print(f"loss: {result['loss']:.6f}")
    print(f"exact_match: {result['exact_match']:.4f}")
    return 0


def cmd_cost(args) -> int:
    cfg = _load_config(args)
    reports = []
    for keep in ("4/5", "1/2"):
        reports.append(cost_report(
            extract_both_ends(cfg.model.n_layers, 4, keep), cfg.model,
            cfg.lora.rank, "fedot", cfg.lora.targets))
        for s in (2, 4):
            reports.append(cost_report(
                extract(cfg.model.n_layers, s, keep), cfg.model,
                cfg.lora.rank, "fedbiot", cfg.lora.targets))
    current = cost_report(
        plan_for_mode(cfg.federation.mode, cfg.model.n_layers,
                      cfg.split.adapter_size, cfg.split.keep_ratio),
        cfg.model, cfg.lora.rank, cfg.federation.mode, cfg.lora.targets)
    reports.append(current)
    print(format_table(reports))
    if args.tsv:
        Path(args.tsv).write_text(format_tsv(reports))
        print(f"rows written to {args.tsv}")
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_table, read_metrics, render_curves, write_plot_data
    run_dir = Path(args.run)
    metrics = run_dir / "metrics.jsonl"
    if not metrics.exists():
        raise FileNotFoundError(f"{metrics} does not exist; run train first")
    rounds, prealign = read_metrics(metrics)
    if not rounds and not prealign:
        raise ConfigError(f"{metrics} holds no plottable records")
    rows = plot_table(rounds)
    data_path = run_dir / "plot_data.tsv"
    png_path = run_dir / "loss_curves.png"
    write_plot_data(rows, data_path)
    render_curves(rows, prealign, png_path)
    print(f"wrote {data_path} and {png_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
