from pathlib import Path
from typing import Any

from pydantic import BaseModel

from .training import ModelConfig, TrainConfig


class RunConfig(BaseModel):
    command: str
    seed: int | None = None
    workers: int = 1
    paths: dict[str, str] = {}
    options: dict[str, Any] = {}


class PipelineConfig(BaseModel):
    image: Path
    corpus: Path
    out_dir: Path
    seed: int = 0
    workers: int = 1
    min_gadgets: int = 2
    long_fraction: float = 0.3
    train_fraction: float = 0.8
    folds: int = 5
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
