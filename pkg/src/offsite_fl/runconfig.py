"""Run configuration: dotted-key text files, flag overrides, snapshots.

Config files are plain text, one `section.key = value` per line, `#` for
comments. Values are JSON (numbers, strings, booleans, lists); bare words
are taken as strings so `mode = fedbiot` works unquoted. Precedence is
command-line overrides > file > defaults. A run's snapshot serializes every
field, so the snapshot alone reproduces the run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Any

from .align import AlignConfig
from .errors import ConfigError
from .fedcore import RoundConfig
from .model import ModelConfig


@dataclass(frozen=True)
class SplitConfig:
    adapter_size: int = 2
    keep_ratio: Any = 0.8  # float, or a string ratio like "4/5"


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "v")


@dataclass(frozen=True)
class PretrainConfig:
    """Server-side base-model training before any split or federated phase.

    Disabled by default (iters = 0). When enabled, every stack weight trains
    on a next-token objective over a fresh task-family corpus, then the stack
    freezes again for the whole offsite procedure. This is what makes the
    plug-back assembly meaningful: the non-compressed layers have to carry
    real computation for returning to them to beat the distilled copy.
    """
    iters: int = 0
    corpus_count: int = 512
    batch_size: int = 10
    lr: float = 0.01

    def __post_init__(self):
        if self.iters < 0:
            raise ConfigError(f"pretrain.iters must be >= 0, got {self.iters}")
        if self.corpus_count < 1 or self.batch_size < 1:
            raise ConfigError("pretrain corpus_count and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"pretrain.lr must be positive, got {self.lr}")


@dataclass(frozen=True)
class DataConfig:
    client_tasks: tuple[str, ...] = ("copy", "reverse", "modular_add", "sort")
    partition_scheme: str = "by_category"
    train_count: int = 512
    eval_count: int = 128
    public_tasks: tuple[str, ...] = ("copy", "reverse")
    public_count: int = 256
    public_overlap: bool = False  # ablation: draw public data from the client mix


@dataclass(frozen=True)
class RunMeta:
    seed: int = 0
    dtype: str = "float32"
    name: str = "run"
    checkpoint_every: int = 10
    keep_checkpoints: int = 3

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"run.dtype must be float32 or float64, got {self.dtype!r}")
        if self.seed < 0:
            raise ConfigError(f"run.seed must be >= 0, got {self.seed}")
        if self.checkpoint_every < 1 or self.keep_checkpoints < 1:
            raise ConfigError("checkpoint cadence and retention must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    federation: RoundConfig = field(default_factory=RoundConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunMeta = field(default_factory=RunMeta)


_SECTIONS = {
    "model": ModelConfig,
    "split": SplitConfig,
    "lora": LoraConfig,
    "pretrain": PretrainConfig,
    "align": AlignConfig,
    "federation": RoundConfig,
    "data": DataConfig,
    "run": RunMeta,
}

# field kind overrides where the dataclass annotation alone is not enough
_KINDS: dict[tuple[str, str], str] = {
    ("split", "keep_ratio"): "ratio",
    ("lora", "targets"): "str_tuple",
    ("data", "client_tasks"): "str_tuple",
    ("data", "public_tasks"): "str_tuple",
    ("align", "betas"): "float_pair",
    ("federation", "betas"): "float_pair",
}

_BASIC = {"int": int, "float": float, "str": str, "bool": bool}


def _field_kind(section: str, name: str, annotation: Any) -> str:
    if (section, name) in _KINDS:
        return _KINDS[(section, name)]
    text = annotation if isinstance(annotation, str) else getattr(
        annotation, "__name__", str(annotation))
    if text in _BASIC:
        return text
    raise ConfigError(f"no coercion rule for {section}.{name} ({text})")


def _coerce(section: str, name: str, kind: str, value: Any) -> Any:
    key = f"{section}.{name}"
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if kind == "ratio":
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{key} expects a number or ratio string, got {value!r}")
        return value
    if kind == "str_tuple":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{key} expects a list of strings, got {value!r}")
        return tuple(value)
    if kind == "float_pair":
        if not isinstance(value, list) or len(value) != 2:
            raise ConfigError(f"{key} expects a pair [x, y], got {value!r}")
        return (float(value[0]), float(value[1]))
    raise ConfigError(f"unhandled kind {kind} for {key}")


def _schema() -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for section, cls in _SECTIONS.items():
        out[section] = {f.name: _field_kind(section, f.name, f.type) for f in fields(cls)}
    return out


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare word -> string


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Flat {dotted_key: value} from config text; no schema check yet."""
    out: dict[str, Any] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{ln}: expected 'section.key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key.count(".") != 1:
            raise ConfigError(f"{source}:{ln}: key {key!r} must be section.field")
        out[key] = _parse_value(raw)
    return out


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key.count(".") != 1:
            raise ConfigError(f"override key {key!r} must be section.field")
        out[key] = _parse_value(raw)
    return out


def build_config(file_text: str | None = None, overrides: list[str] | None = None,
                 source: str = "<config>") -> RunConfig:
    """defaults <- file <- overrides, then construct (and so validate)."""
    schema = _schema()
    flat: dict[str, Any] = {}
    if file_text is not None:
        flat.update(parse_config_text(file_text, source))
    if overrides:
        flat.update(parse_overrides(overrides))
    per_section: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section not in schema:
            raise ConfigError(f"unknown config section {section!r} in {key!r}; "
                              f"sections: {sorted(schema)}")
        if name not in schema[section]:
            raise ConfigError(f"unknown key {key!r}; {section} has: "
                              f"{sorted(schema[section])}")
        per_section[section][name] = _coerce(section, name, schema[section][name], value)
    built = {s: cls(**per_section[s]) for s, cls in _SECTIONS.items()}
    cfg = RunConfig(**built)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: RunConfig) -> None:
    if cfg.federation.mode == "offsite_single" and cfg.federation.n_clients != 1:
        raise ConfigError("offsite_single mode requires federation.n_clients = 1")
    for kind in cfg.data.client_tasks + cfg.data.public_tasks:
        from .data import TASK_KINDS
        if kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {kind!r}; known: {TASK_KINDS}")
    if cfg.federation.batch_size > cfg.data.train_count:
        raise ConfigError("federation.batch_size exceeds data.train_count")
    if cfg.pretrain.batch_size > cfg.pretrain.corpus_count:
        raise ConfigError("pretrain.batch_size exceeds pretrain.corpus_count")


def snapshot_text(cfg: RunConfig) -> str:
    """Every field, one dotted key per line, in schema order."""
    lines = ["# offsite-fl run configuration snapshot"]
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        for f in fields(cls):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{section}.{f.name} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
