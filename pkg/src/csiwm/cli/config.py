"""The single JSON document that drives simulate / train / eval / rollout."""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..losses import LossWeights
from ..model import ModelConfig
from ..preprocess import PreprocConfig
from ..simulator import MotionConfig, SceneConfig
from ..trainer import RunSpec, TrainConfig


class ConfigError(ValueError):
    """Unreadable or invalid run configuration."""


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_trajectories: int = Field(64, ge=1)
    heldout_trajectories: int = Field(16, ge=1)
    steps: int = Field(200, ge=1)
    seed: int = 0
    # held-out trajectories use seeds heldout_seed, heldout_seed + 1, ...
    heldout_seed: int = 100_000


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int | None = None  # None: ceil(0.05 n) per trajectory
    bins: int = Field(50, ge=2)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scene: SceneConfig = Field(default_factory=SceneConfig)
    motion: MotionConfig = Field(default_factory=MotionConfig)
    preproc: PreprocConfig = Field(default_factory=PreprocConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    def run_spec(self) -> RunSpec:
        return RunSpec(model=self.model, loss=self.loss, train=self.train,
                       mask_ratio=self.preproc.mask_ratio, mask_seed=self.preproc.mask_seed)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.model_validate(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        except ValidationError as e:
            raise ConfigError(str(e)) from e


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults.  OSError propagates."""
    if path is None:
        return RunConfig()
    return RunConfig.from_json(Path(path).read_text())
