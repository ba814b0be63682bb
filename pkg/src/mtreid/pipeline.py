"""Config-driven steps shared by the command line and the test-suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .config import ConfigError, RunConfig, dump_config
from .data import DatasetRegistry, generate_synthetic, load_manifest, register, write_manifest
from .evaluator import (
    AttributeAP,
    CMCCurve,
    attribute_average_precision,
    build_report,
    cmc,
    make_trials,
    validate_report,
)
from .losses import Centers
from .matcher import SignatureStore, extract
from .model import Model, ModelConfig, read_weights
from .trainer import Trainer, TrainingLog, initial_centers, read_checkpoint

log = logging.getLogger(__name__)

EFFECTIVE_CONFIG = "config.yaml"
TRAIN_LOG = "train_log.csv"
WEIGHTS = "model.weights"
STORE = "signatures.store"
REPORT = "report.json"


def load_datasets(config: RunConfig) -> list:
    data = config.data
    if data.synthetic is not None:
        return generate_synthetic(data.synthetic_config(), config.seed)
    size = tuple(data.image_size) if data.image_size else None
    return [load_manifest(p, image_size=size, dataset_id=i) for i, p in enumerate(data.manifests)]


def load_registry(config: RunConfig) -> DatasetRegistry:
    return register(load_datasets(config))


def model_config(config: RunConfig, registry: DatasetRegistry) -> ModelConfig:
    m = config.model
    return ModelConfig(
        num_identities=registry.total_identities,
        backbone=m.backbone,
        signature_dim=m.signature_dim,
        fc2_dim=m.fc2_dim,
        attribute_schema=registry.schema,
        dropout_keep=config.hyperparameters.dropout_keep,
        backbone_channels=tuple(m.backbone_channels),
        backbone_norm=m.backbone_norm,
        dtype=m.dtype,
        init_seed=config.seed,
        backbone_weights=m.backbone_weights,
    )


def write_effective_config(config: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / EFFECTIVE_CONFIG
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def synth(config: RunConfig) -> list[Path]:
    """Write one manifest (plus PNGs) per synthetic dataset under the output dir."""
    if config.data.synthetic is None:
        raise ConfigError("synth needs a data.synthetic section")
    out = Path(config.output_dir)
    write_effective_config(config, out)
    paths = []
    for desc, samples in generate_synthetic(config.data.synthetic_config(), config.seed):
        paths.append(write_manifest(out / desc.name / "manifest.jsonl", desc, samples))
    return paths


@dataclass
class TrainResult:
    model: Model
    centers: Centers
    log: TrainingLog
    registry: DatasetRegistry


def train(config: RunConfig, resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """Run the stage plan; write per-stage checkpoints, final weights and the log CSV.

    With ``resume`` the checkpointed stage is finished from its saved state
    and the remaining stages follow, so the log matches an uninterrupted run.
    """
    out = Path(config.output_dir)
    write_effective_config(config, out)
    registry = load_registry(config)
    model = Model(model_config(config, registry))
    centers: Optional[Centers] = None
    training_log = TrainingLog()
    plan = list(enumerate(config.stages))

    if resume is not None:
        _, _, meta, _ = read_checkpoint(resume)
        matches = [i for i, s in plan if s.stage == meta["stage"]]
        if not matches:
            raise ConfigError(f"checkpoint is from stage {meta['stage']}, which the plan does not run")
        idx = matches[0]
        hp = config.stage_hyperparameters(config.stages[idx])
        trainer = Trainer.resume(resume, model, registry, hp)
        trainer.run()
        trainer.checkpoint(out / f"stage{trainer.stage}.ckpt")
        centers, training_log = trainer.centers, trainer.log
        plan = plan[idx + 1:]

    for _, stage in plan:
        if stage.stage == 2 and centers is None:
            centers = initial_centers(model, registry)
        trainer = Trainer(
            model, registry, config.stage_hyperparameters(stage), stage.stage, stage.attributes,
            config.seed, centers=centers, log=training_log, freeze_backbone=stage.freeze_backbone,
        )
        trainer.run()
        log.info("stage %d done at step %d", stage.stage, trainer.step)
        trainer.checkpoint(out / f"stage{stage.stage}.ckpt")
        centers, training_log = trainer.centers, trainer.log

    if centers is None:
        centers = initial_centers(model, registry)
    model.save_weights(out / WEIGHTS)
    training_log.write_csv(out / TRAIN_LOG)
    return TrainResult(model, centers, training_log, registry)


def load_model(config: RunConfig, registry: DatasetRegistry, weights: Union[str, Path]) -> Model:
    """Model built from the config, filled from a weight file whose config must agree."""
    model = Model(model_config(config, registry))
    saved, tensors = read_weights(weights)
    mine = model.config.to_dict()
    bad = sorted(k for k in mine if k not in ("init_seed", "backbone_weights") and saved.get(k) != mine[k])
    if bad:
        raise ConfigError(f"weights {weights} were trained with a different model config (fields {bad})")
    model.load_arrays(saved, tensors)
    return model


def extract_test(model: Model, registry: DatasetRegistry) -> SignatureStore:
    return extract(model, registry.test_samples)


@dataclass
class Evaluation:
    report: dict
    curve: CMCCurve
    attributes: Optional[AttributeAP]


def held_out_attribute_logits(model: Model, registry: DatasetRegistry):
    annotated = [s for s in registry.test_samples if s.attributes is not None]
    if not annotated or not model.config.attribute_schema.names:
        return None, []
    chunks = [
        model.forward(np.stack([s.image for s in annotated[i:i + 256]]), mode="eval").numpy()["attribute_logits"]
        for i in range(0, len(annotated), 256)
    ]
    logits = [np.concatenate([c[l] for c in chunks]) for l in range(len(chunks[0]))]
    return logits, [s.attributes for s in annotated]


def evaluate(
    config: RunConfig,
    model: Model,
    registry: DatasetRegistry,
    store: Optional[SignatureStore] = None,
) -> Evaluation:
    ev = config.evaluation
    test = registry.test_samples
    if store is None:
        store = extract_test(model, registry)
    elif store.model_digest != model.config.digest():
        raise ConfigError("signature store was extracted with a different model config")
    curve = cmc(make_trials(test, ev.trials, ev.seed), store, ev.max_rank)
    logits, annotations = held_out_attribute_logits(model, registry)
    attrs = None
    if logits is not None:
        attrs = attribute_average_precision(logits, annotations, registry.schema, ev.min_support)
    split = {
        "test_samples": len(test),
        "test_identities": len({s.global_identity for s in test}),
        "datasets": [d.name for d in registry.descriptors],
    }
    report = build_report(curve, attrs, ev.seed, split, model.digest())
    validate_report(report)
    return Evaluation(report, curve, attrs)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
