"""Flat ``section.key = value`` configuration."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 64
    hidden_dim: int = 64
    num_queries: int = 16
    num_text: int = 12
    num_ctx: int = 4
    dec_layers: int = 1
    init_layers: int = 2
    text_layers: int = 1
    heads: int = 1
    token_width: int = 10


@dataclass
class LossConfig:
    contrastive: float = 0.5
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1
    tau_init_inv: float = 1.0 / 0.07
    normalize: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 500
    lr: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 0.0


@dataclass
class ContrastiveConfig:
    window: int = 4


@dataclass
class PostConfig:
    object_threshold: float = 0.8
    overlap_threshold: float = 0.8
    top_k: int = 16


@dataclass
class AblationConfig:
    task_token: bool = True
    query_init: str = "task"
    context: bool = True


@dataclass
class DataConfig:
    train: str = ""
    val: str = ""


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    post: PostConfig = field(default_factory=PostConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "Config":
        m = self.model
        if m.num_queries != m.num_text + m.num_ctx:
            raise ConfigError(
                f"model.num_queries ({m.num_queries}) must equal model.num_text + model.num_ctx "
                f"({m.num_text} + {m.num_ctx})"
            )
        for name in ("image_size", "hidden_dim", "num_queries", "num_text", "dec_layers", "init_layers", "heads"):
            if getattr(m, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if m.num_ctx < 0 or m.text_layers < 0:
            raise ConfigError("model.num_ctx and model.text_layers must be non-negative")
        if m.image_size % 32:
            raise ConfigError(f"model.image_size must be divisible by 32, got {m.image_size}")
        if m.hidden_dim % m.heads:
            raise ConfigError("model.hidden_dim must be divisible by model.heads")
        for name in ("contrastive", "cls", "bce", "dice", "no_object"):
            value = getattr(self.loss, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"loss.{name} must be finite and non-negative")
        if self.loss.tau_init_inv <= 0:
            raise ConfigError("loss.tau_init_inv must be positive")
        if self.train.iterations < 0 or self.contrastive.window <= 0:
            raise ConfigError("train.iterations must be >= 0 and contrastive.window > 0")
        if self.ablation.query_init not in ("task", "zeros"):
            raise ConfigError("ablation.query_init must be 'task' or 'zeros'")
        for name in ("object_threshold", "overlap_threshold"):
            if not 0 < getattr(self.post, name) < 1:
                raise ConfigError(f"post.{name} must lie in (0, 1)")
        return self

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        block = getattr(self, section, None)
        if block is None or not name or name not in {f.name for f in dataclasses.fields(block)}:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(block, name)
        setattr(block, name, _coerce(raw, type(current), key))

    def items(self):
        for section in dataclasses.fields(self):
            block = getattr(self, section.name)
            for f in dataclasses.fields(block):
                yield f"{section.name}.{f.name}", getattr(block, f.name)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str) -> "Config":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            cfg.set(key, raw)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _coerce(raw: str, kind: type, key: str):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
