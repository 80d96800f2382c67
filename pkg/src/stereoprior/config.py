"""Run configuration: one JSON document, every field overridable."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .losses import LossWeights
from .refiner import RefinerConfig
from .synthdata import DataConfig


@dataclass
class LoraConfig:
    rank: int = 16
    kappa_max: float = 0.01
    dense_fraction: float = 0.45
    lambda_l1: float = 1e-4
    ramp_fraction: float = 1.0

    def kwargs(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class AlignConfig:
    tau: float = 0.1
    sigma_d: float = 16.0
    sigma_c: float = 0.1
    min_similarity: float = 0.6
    min_margin: float = 0.05
    subpixel: bool = True
    border: int = 2


@dataclass
class RunConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-4
    stage1_learning_rate: float | None = None
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    iteration_loss: bool = False
    mixed_precision: bool = True
    iteration_gamma: float = 0.9
    refiner: RefinerConfig = field(default_factory=RefinerConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    val_count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def lr_stage1(self) -> float:
        return self.learning_rate if self.stage1_learning_rate is None else self.stage1_learning_rate

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        nested = {
            "refiner": RefinerConfig,
            "lora": LoraConfig,
            "loss": LossWeights,
            "align": AlignConfig,
        }
        for key, typ in nested.items():
            if key in d:
                d[key] = typ(**d[key])
        if "data" in d:
            d["data"] = DataConfig.from_dict(d["data"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def desk_config(**overrides) -> RunConfig:
    """Scaled-down run used for the end-to-end checks."""
    base = dict(
        stage1_epochs=3,
        stage2_epochs=6,
        batch_size=4,
        learning_rate=1e-3,
        refiner=RefinerConfig(gru_layers=3, hidden_dim=128, iterations=8),
    )
    base.update(overrides)
    return RunConfig(**base)
