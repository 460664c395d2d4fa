"""Training configuration with strict YAML loading and dotted-key overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .networks import GeneratorConfig
from .style import FusionSchedule


@dataclass
class TrainConfig:
    lambda_cycle: float = 10.0
    lambda_idt: float = 0.5
    lambda_msc: float = 1.0
    lambda_style: float = 1.0
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 2
    epochs: int = 5
    pretrain_epochs: int = 1
    pretrain_batch: int = 4
    mask_ratio: float = 0.4
    alpha: float = 0.99
    fusion_w0: float = 1.0
    fusion_w_min: float = 0.0
    inference_weight: Optional[float] = None
    seed: int = 0
    train_fraction: float = 0.6
    channel_subset_n: int = 16
    channel_subset_rule: str = "first"
    disc_channels: int = 32
    disc_stages: int = 3
    bg_sigma_px: float = 30.0
    lo_pct: float = 1.0
    hi_pct: float = 99.0
    stain_stride: Optional[int] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = _build(GeneratorConfig, self.generator, "generator")
        self.betas = tuple(float(b) for b in self.betas)
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.type in ("float", "Optional[float]") and isinstance(value, (int, float)) \
                    and not isinstance(value, bool):
                setattr(self, f.name, float(value))
            elif f.type in ("int", "Optional[int]") and isinstance(value, float) and value.is_integer():
                setattr(self, f.name, int(value))
        self.validate()

    def validate(self):
        self.loss_weights()
        if self.batch_size < 1 or self.pretrain_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 1 or self.pretrain_epochs < 0:
            raise ConfigError("epochs must be >= 1 and pretrain_epochs >= 0")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0.0 <= self.fusion_w_min <= self.fusion_w0 <= 1.0:
            raise ConfigError("need 0 <= fusion_w_min <= fusion_w0 <= 1")
        if self.inference_weight is not None and not 0.0 <= self.inference_weight <= 1.0:
            raise ConfigError("inference_weight must lie in [0, 1]")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.channel_subset_rule not in ("first", "random"):
            raise ConfigError(f"unknown channel_subset_rule {self.channel_subset_rule!r}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_cycle, self.lambda_idt, self.lambda_msc, self.lambda_style)

    def schedule(self, total_steps: int) -> FusionSchedule:
        return FusionSchedule(self.fusion_w0, self.fusion_w_min, max(int(total_steps), 1))

    @property
    def w_inference(self) -> float:
        return self.fusion_w_min if self.inference_weight is None else self.inference_weight

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["generator"] = self.generator.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data, "")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """512 x 512 inputs, 170 epochs and 50 pretraining epochs with batch 4."""
        gen = GeneratorConfig(input_size=512, stage_channels=(32, 64, 128), token_dim=256,
                              vit_depth=6, vit_heads=8, mlp_ratio=4.0)
        return cls(epochs=170, pretrain_epochs=50, generator=gen, **overrides)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError("unknown config keys: " + ", ".join(prefix + k for k in unknown))
    try:
        return cls(**data)
    except TypeError as err:
        raise ConfigError(f"{where or 'config'}: {err}") from None


def parse_override(text: str) -> tuple[list[str], Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {text!r}")
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    data = dict(data)
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                raise ConfigError(f"unknown config key: {'.'.join(path)}")
            node[part] = child = dict(child)
            node = child
        if path[-1] not in node:
            raise ConfigError(f"unknown config key: {'.'.join(path)}")
        node[path[-1]] = value
    return data


def load_config(path=None, overrides=None) -> TrainConfig:
    base = TrainConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = sorted(set(loaded) - set(base))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
        gen = loaded.pop("generator", None)
        if gen is not None:
            if not isinstance(gen, dict):
                raise ConfigError(f"{path}: generator must be a mapping")
            bad = sorted(set(gen) - set(base["generator"]))
            if bad:
                raise ConfigError(f"{path}: unknown config keys: {', '.join('generator.' + k for k in bad)}")
            base["generator"].update(gen)
        base.update(loaded)
    return TrainConfig.from_dict(apply_overrides(base, overrides))


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
