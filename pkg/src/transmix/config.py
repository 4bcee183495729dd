"""Experiment configuration as line-based ``section.key = value`` text.

``#`` starts a comment anywhere on a line; blank lines are ignored; an
unknown key is an error. ``render`` writes every key, so
``parse(render(cfg)) == cfg``.

Example::

    model.embed_dim = 32
    train.aug_mode = transmix   # none | mixup | cutmix | transmix
    data.source = synthetic_blobs
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import CIFAR_MEAN, CIFAR_STD
from .errors import ConfigError
from .train import TrainConfig
from .vit import ModelConfig

DATA_SOURCES = ("synthetic_blobs", "cifar10_binary")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic_blobs"
    train_path: str = ""
    eval_path: str = ""
    train_samples: int = 2000
    eval_samples: int = 500
    seed: int = 1234
    noise_std: float = 0.5
    amplitude: float = 2.0
    min_radius: float = 3.0
    max_radius: float = 6.0
    norm_mean: tuple[float, ...] = CIFAR_MEAN
    norm_std: tuple[float, ...] = CIFAR_STD

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source {self.source!r} not in {DATA_SOURCES}")


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"
    checkpoint: str = "model.ckpt"
    metrics: str = "metrics.csv"
    mix_log: str = "mixplans.csv"


@dataclass(frozen=True)
class EvalConfig:
    occlusion_order: str = "random"
    occlusion_ratios: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    shuffle_grids: tuple[int, ...] = (1, 4, 16, 64)
    mask_threshold: float = 0.9
    mask_mode: str = "cumulative"
    samples: int = 100
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / self.output.checkpoint

    @property
    def metrics_path(self) -> Path:
        return self.output_dir / self.output.metrics

    @property
    def mix_log_path(self) -> Path:
        return self.output_dir / self.output.mix_log


_SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def _section_types(section_cls) -> dict[str, type]:
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in fields(section_cls)}


def _coerce(raw: str, tp, key: str):
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            (inner, _) = typing.get_args(tp)
            return tuple(_coerce(p.strip(), inner, key) for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported type for {key}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def apply_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    grouped: dict[str, dict] = {}
    for key, raw in items.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        types = _section_types(type(getattr(cfg, section)))
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        grouped.setdefault(section, {})[name] = _coerce(raw, types[name], key)
    try:
        return replace(cfg, **{s: replace(getattr(cfg, s), **vals) for s, vals in grouped.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_lines(text: str) -> dict[str, str]:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return items


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return apply_overrides(base or ExperimentConfig(), parse_lines(text))


def render(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(sub, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load(path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse(text)
    if overrides:
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, _, v = item.partition("=")
            pairs[k.strip()] = v.strip()
        cfg = apply_overrides(cfg, pairs)
    return cfg


__all__ = [
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "OutputConfig",
    "apply_overrides",
    "load",
    "parse",
    "render",
]
