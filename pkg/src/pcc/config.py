"""Run configuration: nested dataclasses loaded from YAML with ``PCC_*`` environment overrides.

Nested fields are addressed with a double underscore, e.g.
``PCC_ENCODER__DEPTH=2`` or ``PCC_PATHS__DATASET=/data/voc``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from pcc.errors import ConfigError
from pcc.fusion import FusionMode
from pcc.pseudo import CRFConfig
from pcc.vit import EncoderConfig

ENV_PREFIX = "PCC_"


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    # (epochs, lr) phases; epochs=None means "for the remaining epochs"
    lr_schedule: list[list[Any]] = field(default_factory=lambda: [[2, 1e-3], [None, 1e-4]])
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.kind != "adam":
            raise ConfigError(f"unsupported optimizer {self.kind!r}")
        if not self.lr_schedule:
            raise ConfigError("lr_schedule is empty")
        for epochs, lr in self.lr_schedule:
            if lr is None or float(lr) <= 0:
                raise ConfigError("learning rates must be positive")
            if epochs is not None and int(epochs) < 1:
                raise ConfigError("schedule phases must last at least one epoch")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        start = 0
        for epochs, lr in self.lr_schedule:
            if epochs is None or epoch < start + int(epochs):
                return float(lr)
            start += int(epochs)
        return float(self.lr_schedule[-1][1])


@dataclass
class PathsConfig:
    dataset: str = "data/synth"
    cluster_map: str | None = None
    checkpoints: str = "runs/checkpoints"
    outputs: str = "runs/outputs"


@dataclass
class ClusterConfig:
    """How ``pcc run`` obtains a cluster map when ``paths.cluster_map`` does not exist yet."""

    backend: str | None = None  # "mock" | "live" | None
    mock_script: str | None = None
    model_id: str = "gpt-4o"
    stability_window: int = 2
    max_iterations: int = 10
    gen_template: str | None = None
    refine_template: str | None = None
    cache_path: str = ".pcc_cache/llm_cache.jsonl"


@dataclass
class CRFSection:
    enabled: bool = False
    params: CRFConfig = field(default_factory=CRFConfig)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cluster_dim: int = 32
    refiner_residual: bool = True
    fusion_mode: str = FusionMode.CLUSTER_TOKEN.value
    topk: int = 6
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 8
    max_epochs: int = 30
    seed: int = 0
    include_background: bool = True
    split: str = "train"
    deterministic: bool = True
    log_epoch_miou: bool = False  # reads gt masks after each epoch; off keeps training mask-free
    augment: bool = False  # reserved; no augmentation is implemented
    paths: PathsConfig = field(default_factory=PathsConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    crf: CRFSection = field(default_factory=CRFSection)

    def __post_init__(self) -> None:
        try:
            FusionMode(self.fusion_mode)
        except ValueError:
            raise ConfigError(f"fusion_mode must be one of {[m.value for m in FusionMode]}") from None
        if self.topk < 1:
            raise ConfigError("topk must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.augment:
            raise ConfigError("augment is reserved and not implemented")
        if self.topk > self.encoder.num_tokens:
            raise ConfigError(f"topk={self.topk} exceeds {self.encoder.num_tokens} patch tokens")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return _build(cls, data)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike, env: Mapping[str, str] | None = None) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(apply_env_overrides(data, os.environ if env is None else env))


def _build(cls, data: Mapping[str, Any]):
    if not isinstance(data, Mapping):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and isinstance(value, Mapping):
            kwargs[name] = _build(type(default), value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def apply_env_overrides(data: dict, env: Mapping[str, str]) -> dict:
    data = dict(data)
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = data
        for part in path[:-1]:
            node[part] = dict(node.get(part) or {})
            node = node[part]
        node[path[-1]] = yaml.safe_load(raw)
    return data
