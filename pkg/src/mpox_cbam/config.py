"""JSON run configuration with strict schema validation."""
from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, ValidationError

from .data import AugmentationSpec, SplitSpec
from .errors import CBAMError, InvalidConfig
from .model import BackboneConfig, ConvBlock
from .training import TrainConfig


class ConfigError(CBAMError, ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    label: str = "CNN-CBAM-Dense"
    blocks: list[tuple[int, int, int, str]] = [(8, 3, 1, "max2"), (16, 3, 1, "max2"), (16, 3, 1, "none")]
    reduction_ratio: int = 8
    freeze: str = "default"


class TrainSection(_Strict):
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


class SplitSection(_Strict):
    train_fraction: float = 0.70
    test_fraction: float = 0.10
    val_fraction: float = 0.20


class AugmentSection(_Strict):
    horizontal_flip: bool = False
    vertical_flip: bool = False
    rotations: list[int] = []


class SynthSection(_Strict):
    n: int = 200
    size: tuple[int, int] = (32, 32)


class RunConfig(_Strict):
    seed: int = 0
    input_size: tuple[int, int] = (32, 32)
    threshold: float = 0.5
    models: list[ModelSection] = [ModelSection()]
    train: TrainSection = TrainSection()
    split: SplitSection = SplitSection()
    augment: AugmentSection = AugmentSection()
    synth: SynthSection = SynthSection()

    # -- domain objects; each raises ConfigError naming the offending key --

    def backbone(self, i: int = 0, input_size=None) -> BackboneConfig:
        h, w = input_size or self.input_size
        with _section(f"models[{i}]"):
            return BackboneConfig(tuple(ConvBlock(*b) for b in self.models[i].blocks), (3, h, w))

    def train_config(self, seed: int | None = None) -> TrainConfig:
        with _section("train"):
            return TrainConfig(**self.train.model_dump(), seed=self.seed if seed is None else seed)

    def split_spec(self, seed: int | None = None) -> SplitSpec:
        with _section("split"):
            return SplitSpec(**self.split.model_dump(), seed=self.seed if seed is None else seed)

    def augmentation(self) -> AugmentationSpec:
        with _section("augment"):
            return AugmentationSpec(self.augment.horizontal_flip, self.augment.vertical_flip,
                                    tuple(self.augment.rotations))

    def validate_all(self):
        if not self.models:
            raise ConfigError("models: at least one model is required")
        labels = [m.label for m in self.models]
        if len(set(labels)) != len(labels):
            raise ConfigError("models: labels must be unique")
        for i, m in enumerate(self.models):
            cfg = self.backbone(i)
            c = cfg.feature_shape[0]
            if m.reduction_ratio < 1 or c % m.reduction_ratio:
                raise ConfigError(f"models[{i}].reduction_ratio: {m.reduction_ratio} does not divide {c} channels")
            if m.freeze not in ("default", "none", "all"):
                raise ConfigError(f"models[{i}].freeze: must be default, none or all")
        if min(self.input_size) < 1:
            raise ConfigError("input_size: extents must be positive")
        if self.synth.n < 2 or self.synth.n % 2:
            raise ConfigError(f"synth.n: must be a positive even number, got {self.synth.n}")
        self.train_config()
        self.split_spec()
        self.augmentation()
        return self


class _section:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, etype, exc, tb):
        if isinstance(exc, InvalidConfig):
            raise ConfigError(f"{self.name}: {exc}") from exc
        return False


def parse_config(obj: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(obj)
    except ValidationError as exc:
        err = exc.errors()[0]
        where = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"{where}: {err['msg']}") from None
    return cfg.validate_all()


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(obj)
