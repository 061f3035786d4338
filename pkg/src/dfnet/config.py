"""Run configuration: model, training and inference settings in one versioned file."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from dfnet import kv
from dfnet.inference import InferConfig
from dfnet.model import ModelConfig
from dfnet.trainer import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)


def dumps(cfg: RunConfig) -> str:
    return kv.dumps(cfg, header="dfnet run configuration")


def loads(text: str) -> RunConfig:
    return kv.loads(RunConfig, text)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def save(path, cfg: RunConfig) -> None:
    Path(path).write_text(dumps(cfg))
