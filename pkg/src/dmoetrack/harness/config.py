"""Training configuration and its line-oriented ``section.key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..fusion import PerturbationConfig
from ..synth import TRAIN_MODALITIES
from ..tracker import LossWeights, ModelConfig


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    # "cosine" decays lr to min_lr_ratio * lr over the run; "constant" keeps it fixed
    schedule: str = "constant"
    min_lr_ratio: float = 0.05


@dataclass
class LoopConfig:
    steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    log_every: int = 100


@dataclass
class DataConfig:
    mix_rgb: float = 0.4
    mix_rgbt: float = 0.2
    mix_rgbd: float = 0.2
    mix_rgbe: float = 0.2
    image_size: int = 32
    num_frames: int = 32
    noise_sigma: float = 0.03
    clutter: int = 2
    search_jitter: float = 1.0
    template_jitter: float = 0.5

    def mix(self) -> list[float]:
        weights = [getattr(self, f"mix_{m}") for m in TRAIN_MODALITIES]
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigError(f"task mix must be non-negative with positive sum, got {weights}")
        total = sum(weights)
        return [w / total for w in weights]


@dataclass
class EvalConfig:
    window_influence: float = 0.5
    update_threshold: float = 0.7
    update_period: int = 25
    precision_px: float = 2.0


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: LoopConfig = field(default_factory=LoopConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.model.validate()
        self.data.mix()
        if self.train.steps < 0 or self.train.batch_size < 2:
            raise ConfigError("steps must be >= 0 and batch_size >= 2")
        if self.optim.lr <= 0 or self.optim.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.optim.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.optim.schedule!r}")
        if not 0.0 <= self.optim.min_lr_ratio <= 1.0:
            raise ConfigError("min_lr_ratio must lie in [0, 1]")


_PARSERS = {"int": int, "float": float, "str": str}


def _parse_value(raw: str, type_name: str, key: str):
    type_name = str(type_name)
    if type_name == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return _PARSERS[type_name](raw)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type_name}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(cfg: TrainConfig) -> str:
    lines = []
    for section in dataclasses.fields(cfg):
        sub = getattr(cfg, section.name)
        for f in dataclasses.fields(sub):
            lines.append(f"{section.name}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def from_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``section.key = value`` lines over ``base`` (defaults when omitted).

    ``#`` starts a comment; blank lines are ignored; keys are case-sensitive.
    """
    updates: dict[str, dict[str, object]] = {}
    sections = {f.name: f for f in dataclasses.fields(TrainConfig)}
    cfg = base or TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or "." not in key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        section, name = key.split(".", 1)
        if section not in sections:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        sub_fields = {f.name: f for f in dataclasses.fields(getattr(cfg, section))}
        if name not in sub_fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates.setdefault(section, {})[name] = _parse_value(raw, sub_fields[name].type, key)
    kwargs = {}
    for section in sections:
        sub = getattr(cfg, section)
        kwargs[section] = dataclasses.replace(sub, **updates.get(section, {}))
    out = TrainConfig(**kwargs)
    out.validate()
    return out


def load_config(path: str | Path) -> TrainConfig:
    return from_text(Path(path).read_text())


def with_overrides(cfg: TrainConfig, **sections) -> TrainConfig:
    """Copy of ``cfg`` with per-section field overrides, e.g. ``train={"steps": 10}``."""
    kwargs = {}
    for f in dataclasses.fields(cfg):
        sub = getattr(cfg, f.name)
        kwargs[f.name] = dataclasses.replace(sub, **sections.get(f.name, {}))
    return TrainConfig(**kwargs)
