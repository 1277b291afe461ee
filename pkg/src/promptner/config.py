"""Run configuration: TOML file sections with dotted CLI overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from promptner.episode_data import ConfigError
from promptner.prompt_builder import DEFAULT_TEMPLATE


@dataclass
class ModelConfig:
    backend: str = "tiny"  # "tiny" | "pretrained"
    checkpoint: str = ""  # Hugging Face checkpoint directory for the pretrained backend
    d: int = 32
    layers: int = 2
    heads: int = 4
    max_len: int = 128
    dropout: float = 0.1
    h: int = 32
    rope_base: float = 10000.0
    leaky_slope: float = 0.01
    two_encoders: bool = True
    template: str = DEFAULT_TEMPLATE
    vocab_min_freq: int = 1
    seed: int = 1


@dataclass
class TrainConfig:
    encoder_lr: float = 2e-5
    decoder_lr: float = 2e-3
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    max_steps: int = 1000
    seed: int = 1
    use_contrastive: bool = False
    negatives_in_class_loss: bool = True
    contrastive_scale: float | None = None  # None -> 1/sqrt(dim)
    grad_clip: float | None = 5.0
    eval_every: int = 0  # 0 disables validation-based model selection

    def __post_init__(self) -> None:
        if self.encoder_lr <= 0 or self.decoder_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")


@dataclass
class FinetuneConfig:
    loss_threshold: float = 1e-2
    max_finetune_steps: int = 50
    encoder_lr: float | None = None  # None -> TrainConfig value
    decoder_lr: float | None = None

    def __post_init__(self) -> None:
        if self.loss_threshold <= 0 or self.max_finetune_steps < 1:
            raise ConfigError("finetune threshold must be > 0 and steps >= 1")


@dataclass
class InferenceConfig:
    gamma: float = 0.7
    alpha: float | None = None  # None -> 0.35 * (1 - gamma)
    beta: float | None = None  # None -> 0.65 * (1 - gamma)
    k_knn: int | None = None  # None -> the episode's K
    bonus_scope: str = "binary"  # "binary" | "entity" | "all"

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.bonus_scope not in ("binary", "entity", "all"):
            raise ConfigError(f"unknown bonus_scope {self.bonus_scope!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    sections = {}
    for name, f in RunConfig.__dataclass_fields__.items():
        block = data.get(name, {})
        if not isinstance(block, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        sections[name] = _build(f.default_factory, block, f"{name}.")
    extra = set(data) - set(sections)
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    return RunConfig(**sections)


def _coerce(text: str, current: Any) -> Any:
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    defaults = RunConfig().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        path, text = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2 or parts[0] not in defaults or parts[1] not in defaults[parts[0]]:
            raise ConfigError(f"unknown override key {path!r}")
        data.setdefault(parts[0], {})[parts[1]] = _coerce(text.strip(), defaults[parts[0]][parts[1]])
    return data


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(apply_overrides(data, list(overrides)))


def dump_toml(cfg: RunConfig) -> str:
    lines = []
    for section, block in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in block.items():
            if value is None:
                continue
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
