"""Run configuration documents (YAML).

A run config names its data (synthetic spec or manifest files), the model,
the hyperparameters, the stage plan and the evaluation seeds. Every section
is optional; omitted keys take their defaults, which for hyperparameters are
the published Table 3 values. Unknown keys are rejected.

Example::

    seed: 0
    output_dir: runs/desk
    data:
      synthetic: {images_per_identity: 6}
    model: {signature_dim: 64}
    hyperparameters: {batch_size: 4, stage1_lr: 0.001}
    stages:
      - {stage: 1, attributes: false, epochs: 100}
      - {stage: 2, attributes: true, epochs: 60, lr: 0.001, freeze_backbone: true}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .data import SyntheticConfig
from .trainer import Hyperparameters


class ConfigError(ValueError):
    pass


def _strict(cls, doc: Any, where: str, skip: tuple[str, ...] = ()):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class DataSection:
    synthetic: Optional[dict] = None
    manifests: Optional[list[str]] = None
    image_size: Optional[list[int]] = None

    def __post_init__(self) -> None:
        if (self.synthetic is None) == (self.manifests is None):
            raise ConfigError("data: give exactly one of 'synthetic' or 'manifests'")
        if self.synthetic is not None:
            self.synthetic = dataclasses.asdict(self.synthetic_config())
            self.synthetic["image_size"] = list(self.synthetic["image_size"])
        if self.manifests is not None:
            if not self.manifests:
                raise ConfigError("data.manifests is empty")
            self.manifests = [str(m) for m in self.manifests]
        if self.image_size is not None:
            self.image_size = [int(v) for v in self.image_size]

    def synthetic_config(self) -> SyntheticConfig:
        spec = dict(self.synthetic)
        if "image_size" in spec:
            spec["image_size"] = tuple(spec["image_size"])
        cfg = _strict(SyntheticConfig, spec, "data.synthetic")
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None
        return cfg


@dataclass
class ModelSection:
    backbone: str = "tiny_cnn"
    signature_dim: int = 4096
    fc2_dim: int = 100
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    backbone_norm: bool = True
    backbone_weights: Optional[str] = None
    dtype: str = "float32"

    def __post_init__(self) -> None:
        self.backbone_channels = [int(c) for c in self.backbone_channels]


@dataclass
class StageSection:
    stage: int
    attributes: bool = False
    epochs: Optional[int] = None
    lr: Optional[float] = None
    freeze_backbone: bool = False

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stages: stage must be 1 or 2, got {self.stage}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("stages: epochs must be >= 1")


@dataclass
class EvalSection:
    trials: int = 10
    seed: int = 0
    max_rank: Optional[int] = None
    min_support: int = 20

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("evaluation.trials must be >= 1")


def _default_stages() -> list[StageSection]:
    return [StageSection(1, attributes=False), StageSection(2, attributes=True)]


@dataclass
class RunConfig:
    data: DataSection
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    stages: list[StageSection] = field(default_factory=_default_stages)
    evaluation: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, doc: Any) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - top)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        if "data" not in doc:
            raise ConfigError("config needs a 'data' section")
        hp_doc = dict(doc.get("hyperparameters") or {})
        if "adam_betas" in hp_doc:
            hp_doc["adam_betas"] = tuple(hp_doc["adam_betas"])
        stages = doc.get("stages")
        if stages is None:
            stage_list = _default_stages()
        else:
            if not isinstance(stages, list) or not stages:
                raise ConfigError("stages must be a non-empty list")
            stage_list = [_strict(StageSection, s, f"stages[{i}]") for i, s in enumerate(stages)]
        numbers = [s.stage for s in stage_list]
        if numbers != sorted(set(numbers)):
            raise ConfigError(f"stages must run in order, each at most once (got {numbers})")
        return cls(
            data=_strict(DataSection, doc["data"], "data"),
            seed=int(doc.get("seed", 0)),
            output_dir=str(doc.get("output_dir", "runs/default")),
            model=_strict(ModelSection, doc.get("model"), "model"),
            # stage epochs and lr live in the stage plan
            hyperparameters=_strict(Hyperparameters, hp_doc, "hyperparameters",
                                    skip=("stage1_epochs", "stage2_epochs")),
            stages=stage_list,
            evaluation=_strict(EvalSection, doc.get("evaluation"), "evaluation"),
        )

    def to_dict(self) -> dict:
        hp = dataclasses.asdict(self.hyperparameters)
        hp.pop("stage1_epochs")
        hp.pop("stage2_epochs")
        hp["adam_betas"] = list(hp["adam_betas"])
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "hyperparameters": hp,
            "stages": [dataclasses.asdict(s) for s in self.stages],
            "evaluation": dataclasses.asdict(self.evaluation),
        }

    def stage_hyperparameters(self, stage: StageSection) -> Hyperparameters:
        """Table 3 hyperparameters with this stage's epochs and learning rate filled in."""
        hp = dataclasses.replace(self.hyperparameters)
        if stage.stage == 1:
            hp.stage1_epochs = stage.epochs
            if stage.lr is not None:
                hp.stage1_lr = stage.lr
        else:
            hp.stage2_epochs = stage.epochs
            if stage.lr is not None:
                hp.stage2_lr = stage.lr
        return hp

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed))

    def with_output_dir(self, out: Union[str, Path]) -> "RunConfig":
        return dataclasses.replace(self, output_dir=str(out))


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return RunConfig.from_dict(doc)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
