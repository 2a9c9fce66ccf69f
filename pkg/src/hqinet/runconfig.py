"""Run configuration: one JSON-serializable object that pins everything
a training, evaluation, or generation run depends on."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .dataset import SyntheticSpec
from .errors import ConfigError
from .losses import LossWeights, SsimParams
from .network import ModelConfig

__all__ = ["OptimizerConfig", "DataConfig", "RunConfig"]


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DataConfig:
    root: str = "data"
    crop: int = 64  # training crop size; 0 disables cropping
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if self.crop < 0:
            raise ValueError(f"crop must be >= 0, got {self.crop}")
        if self.crop and self.crop % 16:
            raise ValueError(f"crop must be divisible by 16, got {self.crop}")

    def to_dict(self):
        return {"root": self.root, "crop": self.crop,
                "synthetic": self.synthetic.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "synthetic" in d:
            d["synthetic"] = SyntheticSpec.from_dict(d["synthetic"])
        return cls(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimParams = field(default_factory=SsimParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 4
    epochs: int = 5
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/desk"
    strict_determinism: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    @classmethod
    def desk(cls):
        """CPU-scale defaults: small widths, batch 4, lr 1e-3, 64px crops."""
        return cls()

    @classmethod
    def full_scale(cls):
        """Full-width model, batch 88, lr 0.01, whole slices; needs real
        hardware and is not exercised by the test suite."""
        return cls(model=ModelConfig(), batch_size=88, epochs=20,
                   optimizer=OptimizerConfig(lr=0.01), output_dir="runs/full",
                   data=DataConfig(crop=0))

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "loss_weights": self.loss_weights.to_dict(),
            "ssim": self.ssim.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
            "strict_determinism": self.strict_determinism,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown run config fields: {sorted(extra)}")
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            if "loss_weights" in d:
                d["loss_weights"] = LossWeights.from_dict(d["loss_weights"])
            if "ssim" in d:
                d["ssim"] = SsimParams.from_dict(d["ssim"])
            if "optimizer" in d:
                d["optimizer"] = OptimizerConfig.from_dict(d["optimizer"])
            if "data" in d:
                d["data"] = DataConfig.from_dict(d["data"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_json(cls, path):
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(raw)
