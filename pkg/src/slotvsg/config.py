"""Training configuration and its ``.cfg`` (INI) file form.

Sections mirror the dataclasses below; every key must be a known field and
values are converted to the field's type. Overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

from .objectives import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_objects: int = 16
    num_relations: int = 8
    slot_dim: int = 64
    enc_dim: int = 64
    dec_dim: int = 16
    stride: int = 8
    iters: int = 3
    encoder_depth: int = 2
    init_mode: str = "learned"


@dataclass
class LossConfig:
    obj_cls: float = 1.0
    box: float = 5.0
    giou: float = 2.0
    mask: float = 5.0
    dice: float = 5.0
    rel_cls: float = 1.0
    sidx: float = 1.0
    oidx: float = 1.0
    consistency: float = 1.0
    no_object: float = 0.1
    index_temperature: float = 0.1
    use_consistency: bool = True

    def weights(self) -> LossWeights:
        fields = {f.name for f in dataclasses.fields(LossWeights)}
        return LossWeights(**{k: v for k, v in dataclasses.asdict(self).items() if k in fields})


@dataclass
class TrainerConfig:
    task: str = "dsgg"  # dsgg | pvsg | joint
    steps: int = 2000
    lr: float = 3e-4
    batch_size: int = 1
    clip_min: int = 4
    clip_max: int = 8
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"
    joint_schedule: str = "sum"  # sum | alternate
    score_threshold: float = 0.0


@dataclass
class DataConfig:
    root: str = ""
    train_split: str = "train"
    eval_split: str = "eval"
    features: str = ""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        t = self.trainer
        if t.task not in ("dsgg", "pvsg", "joint"):
            raise ConfigError(f"trainer.task must be dsgg, pvsg or joint, got {t.task!r}")
        if t.steps < 0:
            raise ConfigError("trainer.steps must be >= 0")
        if not 1 <= t.clip_min <= t.clip_max:
            raise ConfigError("need 1 <= trainer.clip_min <= trainer.clip_max")
        if t.dtype not in ("float32", "float64"):
            raise ConfigError("trainer.dtype must be float32 or float64")
        if t.joint_schedule not in ("sum", "alternate"):
            raise ConfigError("trainer.joint_schedule must be sum or alternate")
        if self.model.init_mode not in ("learned", "carry_previous"):
            raise ConfigError("model.init_mode must be learned or carry_previous")
        if self.model.num_objects < 1 or self.model.num_relations < 1:
            raise ConfigError("model.num_objects and model.num_relations must be >= 1")
        try:
            self.loss.weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls()
        for section, values in d.items():
            for key, value in values.items():
                set_value(cfg, f"{section}.{key}", value)
        return cfg


SECTIONS = ("model", "loss", "trainer", "data")


def _convert(value: Any, typ) -> Any:
    if isinstance(value, str):
        text = value.strip()
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    if typ is bool and not isinstance(value, bool):
        raise ValueError(f"not a boolean: {value!r}")
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ValueError(f"not an integer: {value!r}")
    if typ is float:
        return float(value)
    return typ(value)


def set_value(cfg: TrainConfig, dotted: str, value: Any) -> None:
    try:
        section, key = dotted.split(".", 1)
    except ValueError:
        raise ConfigError(f"override {dotted!r} must look like section.key") from None
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r} (expected one of {', '.join(SECTIONS)})")
    obj = getattr(cfg, section)
    hints = get_type_hints(type(obj))
    if key not in hints:
        raise ConfigError(f"unknown config key {section}.{key}")
    try:
        setattr(obj, key, _convert(value, hints[key]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides=()) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            read = parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not read:
            raise ConfigError(f"{path}: cannot read config file")
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(cfg, f"{section}.{key}", value)
    for item in overrides:
        set_value(cfg, *parse_override(item))
    cfg.validate()
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        lines.append("")
    return "\n".join(lines)
