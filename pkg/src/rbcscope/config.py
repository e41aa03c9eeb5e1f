"""Pipeline configuration: one JSON file, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .detector import DetectorConfig
from .evalharness import ExperimentConfig
from .gbm import GBMConfig
from .heads import HeadConfig
from .synthgen import DatasetConfig


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    fold_seed: int = 0
    coverage: float = 0.3
    detector_train_scenes: int = 100
    detector_test_scenes: int = 30
    iou_threshold: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    dataset_dir: str = "data"
    models_dir: str = "models"
    reports_dir: str = "reports"
    analysis_dir: str = "analysis"
    featurizer_seed: int = 0
    # outward box jitter (px) for the extra head-training patches; 0 disables
    box_jitter: int = 3
    dataset: DatasetConfig = DatasetConfig()
    detector: DetectorConfig = DetectorConfig()
    heads: HeadConfig = HeadConfig(epochs=15)
    gbm: GBMConfig = GBMConfig()
    eval: EvalConfig = EvalConfig()

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(dataset=self.dataset, featurizer_seed=self.featurizer_seed, heads=self.heads,
                                gbm=self.gbm, k=self.eval.k, fold_seed=self.eval.fold_seed, coverage=self.eval.coverage)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every seed field set to ``seed``."""
        return dataclasses.replace(
            self,
            featurizer_seed=seed,
            dataset=dataclasses.replace(self.dataset, seed=seed),
            detector=dataclasses.replace(self.detector, seed=seed),
            heads=dataclasses.replace(self.heads, seed=seed),
            eval=dataclasses.replace(self.eval, fold_seed=seed),
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


class ConfigError(ValueError):
    pass


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
