"""Two-stage training loop.

Stage 1 trains identity + center losses at a higher learning rate. Stage 2
reloads those weights (and centers) and continues at a lower rate, with or
without the attribute losses.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from . import binio
from .data.registry import DatasetRegistry, EpochSampler
from .evaluator import cmc, make_trials
from .losses import Centers, LossBreakdown, LossWeights, total_loss, update_centers
from .matcher import extract
from .model import Model, read_weights

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MTRC"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ["step", "stage", "l_id", "l_cs", "l_att", "total", "cmc_rank1_train"]


class DivergenceError(RuntimeError):
    def __init__(self, step: int, stage: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step} (stage {stage})")
        self.step = step
        self.stage = stage


class CheckpointError(ValueError):
    pass


@dataclass
class Hyperparameters:
    dropout_keep: float = 0.8
    l2_regularization: float = 0.001
    batch_size: int = 64
    lam: float = 100.0
    cs_alpha: float = 0.9
    alpha: float = 0.06
    stage1_lr: float = 1e-4
    stage2_lr: float = 1e-6
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # None: train until the logged train rank-1 plateaus (capped by max_epochs)
    stage1_epochs: Optional[int] = None
    stage2_epochs: Optional[int] = None
    max_epochs: int = 200
    plateau_patience: int = 5
    eval_every: int = 50
    eval_trials: int = 3

    def __post_init__(self) -> None:
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        positive = [
            "dropout_keep", "l2_regularization", "batch_size", "lam", "cs_alpha",
            "stage1_lr", "stage2_lr", "adam_eps", "max_epochs", "eval_every", "eval_trials",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def lr(self, stage: int) -> float:
        return self.stage1_lr if stage == 1 else self.stage2_lr

    def epochs(self, stage: int) -> Optional[int]:
        return self.stage1_epochs if stage == 1 else self.stage2_epochs


@dataclass
class StepRecord:
    step: int
    stage: int
    breakdown: LossBreakdown
    cmc_rank1_train: Optional[float] = None
    wall_time: float = 0.0

    @property
    def l_cs(self) -> float:
        return self.breakdown.l_cs


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("log steps must increase")
        self.records.append(record)

    def rows(self) -> list[dict]:
        out = []
        for r in self.records:
            b = r.breakdown
            out.append({
                "step": r.step,
                "stage": r.stage,
                "l_id": repr(b.l_id),
                "l_cs": repr(b.l_cs),
                "l_att": repr(b.l_att_total),
                "total": repr(b.total),
                "cmc_rank1_train": "" if r.cmc_rank1_train is None else repr(r.cmc_rank1_train),
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()

    def write_csv(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "TrainingLog":
        out = cls()
        for row in rows:
            b = LossBreakdown(
                l_id=float(row["l_id"]), l_cs=float(row["l_cs"]), l_att_per_attribute=[],
                l_att_total=float(row["l_att"]), total=float(row["total"]), alpha=math.nan, lam=math.nan,
            )
            rank1 = row["cmc_rank1_train"]
            out.append(StepRecord(int(row["step"]), int(row["stage"]), b, float(rank1) if rank1 != "" else None))
        return out

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "TrainingLog":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls.from_rows(list(csv.DictReader(fh)))

    def rank1_series(self) -> list[tuple[int, float]]:
        return [(r.step, r.cmc_rank1_train) for r in self.records if r.cmc_rank1_train is not None]

    @property
    def last_step(self) -> int:
        return self.records[-1].step if self.records else 0


def train_rank1(model: Model, registry: DatasetRegistry, trials: int = 3, seed: int = 12345) -> float:
    """Rank-1 CMC of cross-camera trials over all training identities."""
    store = extract(model, registry.samples)
    return cmc(make_trials(registry.samples, trials, seed), store, max_rank=1).rank1


def initial_centers(model: Model, registry: DatasetRegistry) -> Centers:
    """Class means of the untrained eval-mode signatures; unseen classes stay at 0."""
    store = extract(model, registry.samples)
    centers = Centers.zeros(registry.total_identities, model.config.signature_dim)
    for k in np.unique(store.global_identities):
        centers.matrix[k] = store.vectors[store.global_identities == k].astype(np.float64).mean(axis=0)
    return centers


class Trainer:
    """Mutable training state for one stage: model, centers, Adam, sampler, dropout RNG."""

    def __init__(
        self,
        model: Model,
        registry: DatasetRegistry,
        hp: Hyperparameters,
        stage: int,
        attributes_enabled: bool,
        seed: int,
        centers: Optional[Centers] = None,
        log: Optional[TrainingLog] = None,
        freeze_backbone: bool = False,
    ):
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if stage == 2 and centers is None:
            raise ValueError("stage 2 continues from stage-1 centers; pass them in")
        if model.config.num_identities != registry.total_identities:
            raise ValueError(
                f"model has {model.config.num_identities} identity logits, "
                f"registry has {registry.total_identities} identities"
            )
        self.model = model
        self.registry = registry
        self.hp = hp
        self.stage = stage
        self.attributes_enabled = bool(attributes_enabled) and any(
            d.has_attributes for d in registry.descriptors
        )
        self.seed = seed
        self.freeze_backbone = freeze_backbone
        self.centers = centers.copy() if centers is not None else initial_centers(model, registry)
        self.log = log if log is not None else TrainingLog()
        self.step = self.log.last_step
        self.stage_steps = 0
        self.weights = LossWeights.from_registry(
            registry, alpha=hp.alpha, lam=hp.lam if self.attributes_enabled else 0.0
        )
        self.sampler = EpochSampler(registry, hp.batch_size, seed=seed * 1000 + stage)
        self.generator = torch.Generator().manual_seed(seed * 1000 + stage + 500)
        self.optimizer = self._make_optimizer()
        self._plateau = (-math.inf, 0)

    def _make_optimizer(self) -> torch.optim.Adam:
        named = self.model.named_parameters(self.freeze_backbone)
        if not self.attributes_enabled:
            # With no attribute term the branch has no data gradient; under Adam
            # the L2 term alone would drive it to zero before stage 2 starts.
            named = [(n, p) for n, p in named if not n.startswith(("fc2.", "att_heads."))]
        # L2 penalty on weights only, not biases
        decay = [p for n, p in named if not n.endswith(".bias")]
        no_decay = [p for n, p in named if n.endswith(".bias")]
        return torch.optim.Adam(
            [
                {"params": decay, "weight_decay": self.hp.l2_regularization},
                {"params": no_decay, "weight_decay": 0.0},
            ],
            lr=self.hp.lr(self.stage),
            betas=self.hp.adam_betas,
            eps=self.hp.adam_eps,
            foreach=False,
        )

    def train_step(self) -> StepRecord:
        batch = self.sampler.next_batch()
        out = self.model.forward(batch.images, mode="train", generator=self.generator)
        arrays = out.numpy()
        if not all(np.all(np.isfinite(a)) for a in (arrays["signatures"], arrays["identity_logits"])):
            raise DivergenceError(self.step + 1, self.stage, math.nan)
        breakdown, grads = total_loss(
            arrays, batch, self.centers, self.weights, self.model.config.attribute_schema
        )
        self.step += 1
        self.stage_steps += 1
        if not math.isfinite(breakdown.total):
            raise DivergenceError(self.step, self.stage, breakdown.total)
        self.optimizer.zero_grad(set_to_none=False)
        out.backward(grads)
        self.optimizer.step()
        self.centers = update_centers(
            self.centers, arrays["signatures"], batch.global_identities, self.hp.cs_alpha
        )
        record = StepRecord(self.step, self.stage, breakdown, wall_time=time.time())
        if self.stage_steps % self.hp.eval_every == 0:
            record.cmc_rank1_train = train_rank1(self.model, self.registry, self.hp.eval_trials)
        self.log.append(record)
        return record

    def _plateaued(self, record: StepRecord) -> bool:
        if record.cmc_rank1_train is None:
            return False
        best, stale = self._plateau
        if record.cmc_rank1_train > best:
            self._plateau = (record.cmc_rank1_train, 0)
            return False
        self._plateau = (best, stale + 1)
        return stale + 1 >= self.hp.plateau_patience

    def steps_per_epoch(self) -> int:
        return -(-len(self.registry.samples) // self.hp.batch_size)

    def run(self, max_steps: Optional[int] = None) -> TrainingLog:
        """Train for the configured epochs (or until plateau); ``max_steps`` caps this call."""
        epochs = self.hp.epochs(self.stage)
        budget = (epochs if epochs is not None else self.hp.max_epochs) * self.steps_per_epoch()
        done = 0
        while self.stage_steps < budget and (max_steps is None or done < max_steps):
            record = self.train_step()
            done += 1
            if epochs is None and self._plateaued(record):
                log.info("stage %d plateaued at step %d", self.stage, self.step)
                break
        return self.log

    # checkpointing -------------------------------------------------------

    def checkpoint(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.checkpoint_bytes())

    def checkpoint_bytes(self) -> bytes:
        records = [("centers", self.centers.matrix)]
        opt = self.optimizer.state_dict()
        for idx, st in sorted(opt["state"].items()):
            records.append((f"optim.{idx}.step", np.array([float(st["step"])], dtype=np.float64)))
            records.append((f"optim.{idx}.exp_avg", st["exp_avg"].numpy()))
            records.append((f"optim.{idx}.exp_avg_sq", st["exp_avg_sq"].numpy()))
        records.append(("dropout_rng", self.generator.get_state().numpy()))
        meta = {
            "stage": self.stage,
            "step": self.step,
            "stage_steps": self.stage_steps,
            "seed": self.seed,
            "attributes_enabled": self.attributes_enabled,
            "freeze_backbone": self.freeze_backbone,
            "hyperparameters": dataclasses.asdict(self.hp),
            "sampler": self.sampler.state(),
            "plateau": list(self._plateau),
            "log": self.log.rows(),
        }
        ext = io.BytesIO()
        blob = json.dumps(meta, sort_keys=True).encode()
        ext.write(struct.pack("<I", len(blob)))
        ext.write(blob)
        binio.write_records(ext, records)
        weights = self.model.weights_bytes()
        head = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(weights))
        return head + weights + binio.seal(ext.getvalue())

    @classmethod
    def resume(
        cls,
        path: Union[str, Path],
        model: Model,
        registry: DatasetRegistry,
        hp: Hyperparameters,
    ) -> "Trainer":
        """Rebuild a trainer so the following steps match an uninterrupted run."""
        cfg, weights, meta, records = read_checkpoint(path)
        saved_hp = meta["hyperparameters"]
        if saved_hp["batch_size"] != hp.batch_size:
            raise CheckpointError(
                f"checkpoint batch_size {saved_hp['batch_size']} differs from {hp.batch_size}"
            )
        if "centers" not in records:
            if hp.alpha > 0:
                raise CheckpointError("checkpoint has no centers but alpha > 0")
            centers = None
        else:
            centers = Centers(records["centers"].astype(np.float64))
        model.load_arrays(cfg, weights)
        log_ = TrainingLog.from_rows(meta["log"])
        if centers is None:
            centers = Centers.zeros(registry.total_identities, model.config.signature_dim)
        trainer = cls(
            model, registry, hp, meta["stage"], meta["attributes_enabled"], meta["seed"],
            centers=centers, log=log_, freeze_backbone=meta["freeze_backbone"],
        )
        trainer.step = meta["step"]
        trainer.stage_steps = meta["stage_steps"]
        trainer.sampler.load_state(meta["sampler"])
        trainer.generator.set_state(torch.from_numpy(records["dropout_rng"].astype(np.uint8)))
        trainer._plateau = tuple(meta["plateau"])
        state = trainer.optimizer.state_dict()
        params = [p for g in state["param_groups"] for p in g["params"]]
        new_state = {}
        for idx in params:
            key = f"optim.{idx}.step"
            if key in records:
                new_state[idx] = {
                    "step": torch.tensor(float(records[key][0])),
                    "exp_avg": torch.from_numpy(records[f"optim.{idx}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(records[f"optim.{idx}.exp_avg_sq"].copy()),
                }
        state["state"] = new_state
        trainer.optimizer.load_state_dict(state)
        return trainer


def read_checkpoint(path: Union[str, Path]) -> tuple[dict, dict, dict, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n = struct.unpack("<IQ", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg, weights = read_weights(blob[16:16 + n])
    fh = binio.unseal(blob[16 + n:], "checkpoint")
    (m,) = struct.unpack("<I", binio.read_exact(fh, 4))
    meta = json.loads(binio.read_exact(fh, m))
    records = binio.read_records(fh)
    return cfg, weights, meta, records


def run_stage(
    model: Model,
    registry: DatasetRegistry,
    hp: Hyperparameters,
    stage: int,
    attributes_enabled: bool,
    seed: int,
    centers: Optional[Centers] = None,
    log: Optional[TrainingLog] = None,
    freeze_backbone: bool = False,
    max_steps: Optional[int] = None,
) -> tuple[Model, Centers, TrainingLog]:
    trainer = Trainer(
        model, registry, hp, stage, attributes_enabled, seed,
        centers=centers, log=log, freeze_backbone=freeze_backbone,
    )
    trainer.run(max_steps=max_steps)
    return model, trainer.centers, trainer.log
