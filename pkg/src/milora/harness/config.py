"""Run configuration in a flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ..backbone import BackboneConfig
from ..model import AdapterConfig
from ..numcore import ConfigError
from ..training import TrainConfig

TASK_KINDS = ("copy", "reverse", "modular", "charlm", "mix")


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab: int = 16
    length: int = 8
    modulus: int = 23
    path: str = ""
    window: int = 16
    prompt_len: int = 8
    mix: str = ""          # "copy:0.5,reverse:0.5"
    n_examples: int = 2200

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "mix":
            self.mix_weights()

    def mix_weights(self) -> list[tuple[str, float]]:
        parts = []
        for item in filter(None, (s.strip() for s in self.mix.split(","))):
            name, _, w = item.partition(":")
            if name not in TASK_KINDS or name == "mix":
                raise ConfigError(f"bad mix component {name!r}")
            weight = float(w) if w else 1.0
            if weight <= 0:
                raise ConfigError("mix weights must be positive")
            parts.append((name, weight))
        if not parts:
            raise ConfigError("task.mix needs at least one component")
        total = sum(w for _, w in parts)
        return [(n, w / total) for n, w in parts]


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    pretrain_steps: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    lines.append(f"{f.name}.{sub.name} = {_fmt(getattr(value, sub.name))}")
            else:
                lines.append(f"{f.name} = {_fmt(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        top: dict[str, str] = {}
        sections: dict[str, dict[str, str]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = key.strip(), value.strip()
            if "." in key:
                sec, _, sub = key.partition(".")
                sections.setdefault(sec, {})[sub] = value
            else:
                top[key] = value
        base = cls()
        kwargs = {}
        for f in dataclasses.fields(cls):
            default = getattr(base, f.name)
            if dataclasses.is_dataclass(default):
                given = sections.pop(f.name, {})
                kwargs[f.name] = _build(type(default), default, given, f.name)
            elif f.name in top:
                kwargs[f.name] = _cast(top.pop(f.name), default, f.name)
        if top or sections:
            unknown = list(top) + [f"{s}.*" for s in sections]
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def _fmt(v) -> str:
    if isinstance(v, Enum):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cast(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, Enum):
            return type(default)(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _build(kind, default, given: dict[str, str], section: str):
    names = {f.name for f in dataclasses.fields(kind)}
    extra = set(given) - names
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(f'{section}.{k}' for k in sorted(extra))}")
    values = {}
    for f in dataclasses.fields(kind):
        d = getattr(default, f.name)
        values[f.name] = _cast(given[f.name], d, f"{section}.{f.name}") if f.name in given else d
    try:
        return kind(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] config: {exc}") from exc


def preset(name: str) -> RunConfig:
    """Named desk-scale presets."""
    if name == "copy":
        return RunConfig(
            seed=0, output_dir="runs/copy",
            backbone=BackboneConfig(vocab_size=16, d_model=128, n_layers=4, n_heads=4,
                                    d_ffn=344, max_seq_len=32),
            adapter=AdapterConfig(rank=8, k=3),
            train=TrainConfig(lr_omega=3e-3, lr_theta=1e-6, lambda_lb=1e-2, batch_size=16,
                              max_steps=2000, eval_every=100, patience=10),
            task=TaskSpec(kind="copy", vocab=16, length=8, n_examples=2200),
        )
    if name == "tiny":
        return RunConfig(
            seed=0, output_dir="runs/tiny",
            backbone=BackboneConfig(vocab_size=16, d_model=64, n_layers=2, n_heads=4,
                                    d_ffn=96, max_seq_len=32),
            adapter=AdapterConfig(rank=4, k=3),
            train=TrainConfig(lr_omega=3e-3, lr_theta=1e-6, lambda_lb=1e-2, batch_size=16,
                              max_steps=60, eval_every=20, patience=10),
            task=TaskSpec(kind="copy", vocab=16, length=6, n_examples=400),
        )
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("copy", "tiny")
