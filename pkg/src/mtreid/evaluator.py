"""Re-identification evaluation: identity splits, cross-camera trials, CMC and attribute AP."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data.types import BINARY, AttributeAnnotation, AttributeSchema, Sample
from .matcher import MatchError, SignatureStore, rank


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    dataset: str
    train_identities: tuple[int, ...]
    test_identities: tuple[int, ...]
    seed: int

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "train_identities": list(self.train_identities),
            "test_identities": list(self.test_identities),
            "seed": self.seed,
        }


def make_split(
    identities: Union[int, Sequence[int]],
    protocol: str = "half",
    seed: int = 0,
    test_count: Optional[int] = None,
    dataset: str = "",
) -> SplitSpec:
    """Seeded identity partition.

    ``half`` puts ``n // 2`` identities in the test set and the rest in
    training (CUHK01: 485 test / 486 train, VIPeR: 316 / 316). ``fixed``
    takes exactly ``test_count`` test identities (CUHK03 uses 100).
    """
    ids = np.arange(identities) if isinstance(identities, (int, np.integer)) else np.asarray(list(identities))
    n = len(ids)
    if protocol == "half":
        n_test = n // 2
    elif protocol == "fixed":
        if test_count is None:
            raise EvalError("fixed protocol needs test_count")
        n_test = int(test_count)
    else:
        raise EvalError(f"unknown split protocol {protocol!r}")
    if n_test < 1 or n_test >= n:
        raise EvalError(f"cannot take {n_test} test identities out of {n}")
    perm = np.random.default_rng(seed).permutation(n)
    test = sorted(int(i) for i in ids[perm[:n_test]])
    train = sorted(int(i) for i in ids[perm[n_test:]])
    return SplitSpec(dataset, tuple(train), tuple(test), seed)


@dataclass(frozen=True)
class ProbeGalleryTrial:
    probes: tuple[int, ...]
    gallery: tuple[int, ...]
    probe_identities: tuple[int, ...]


def make_trial(samples: Sequence[Sample], seed: int, probe_camera: Optional[int] = None) -> ProbeGalleryTrial:
    """Single-shot cross-camera trial: one probe and one gallery image per identity.

    The gallery image always comes from a different camera than its probe.
    """
    by_id: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
    for s in samples:
        by_id[s.global_identity][s.camera_id].append(s.sample_id)
    lonely = sorted(i for i, cams in by_id.items() if len(cams) < 2)
    if lonely:
        raise EvalError(f"identities seen by a single camera: {lonely}")
    if not by_id:
        raise EvalError("no test samples")
    rng = np.random.default_rng(seed)
    probes, gallery, truth = [], [], []
    for ident in sorted(by_id):
        cams = sorted(by_id[ident])
        if probe_camera is not None and probe_camera in cams:
            pc = probe_camera
        else:
            pc = cams[rng.integers(len(cams))]
        others = [c for c in cams if c != pc]
        gc = others[rng.integers(len(others))]
        p_imgs, g_imgs = by_id[ident][pc], by_id[ident][gc]
        probes.append(int(p_imgs[rng.integers(len(p_imgs))]))
        gallery.append(int(g_imgs[rng.integers(len(g_imgs))]))
        truth.append(int(ident))
    return ProbeGalleryTrial(tuple(probes), tuple(gallery), tuple(truth))


def make_trials(samples: Sequence[Sample], n_trials: int = 10, seed: int = 0) -> list[ProbeGalleryTrial]:
    return [make_trial(samples, seed=int(s)) for s in np.random.SeedSequence(seed).generate_state(n_trials)]


@dataclass(frozen=True)
class CMCCurve:
    values: np.ndarray
    trials: int

    @property
    def rank1(self) -> float:
        return float(self.values[0])

    def at(self, k: int) -> float:
        return float(self.values[k - 1])


def match_ranks(trial: ProbeGalleryTrial, store: SignatureStore) -> list[float]:
    """1-based rank of each probe's first true match (inf when absent)."""
    gallery = store.subset(trial.gallery)
    rows = store.row_of()
    gallery_rows = gallery.row_of()
    ranks = []
    for pid, ident in zip(trial.probes, trial.probe_identities):
        if pid not in rows:
            raise EvalError(f"probe {pid} has no signature")
        result = rank(store.vectors[rows[pid]], gallery, probe_id=pid)
        ids = gallery.global_identities[[gallery_rows[int(g)] for g in result.gallery_ids]]
        hit = np.flatnonzero(ids == ident)
        ranks.append(float(hit[0] + 1) if len(hit) else math.inf)
    return ranks


def cmc(trials: Sequence[ProbeGalleryTrial], store: SignatureStore, max_rank: Optional[int] = None) -> CMCCurve:
    """Fraction of probes whose true match lies within the top k, pooled over trials."""
    if not trials:
        raise EvalError("no trials")
    size = len(trials[0].gallery)
    if any(len(t.gallery) != size for t in trials):
        raise EvalError("trials have different gallery sizes")
    length = size if max_rank is None else min(max_rank, size)
    hits = np.zeros(length, dtype=np.int64)
    total = 0
    try:
        for trial in trials:
            for r in match_ranks(trial, store):
                total += 1
                if r <= length:
                    hits[int(r) - 1:] += 1
    except MatchError as exc:
        raise EvalError(str(exc)) from None
    return CMCCurve(hits / total, len(trials))


def average_precision(scores, positives) -> float:
    """Mean precision at each positive over the score-descending ranking (ties keep input order)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    hit = positives[order]
    ranks = np.flatnonzero(hit) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.mean())


@dataclass
class AttributeAP:
    per_attribute: dict[str, Optional[float]]
    per_class: dict[str, dict[int, float]]
    excluded: dict[str, list[int]] = field(default_factory=dict)
    mean: float = math.nan

    def to_dict(self) -> dict:
        return {
            "per_attribute_ap": self.per_attribute,
            "per_class_ap": {k: {str(c): v for c, v in d.items()} for k, d in self.per_class.items()},
            "excluded_classes": self.excluded,
            "mean_ap": None if math.isnan(self.mean) else self.mean,
        }


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def attribute_average_precision(
    attribute_logits: Sequence[np.ndarray],
    annotations: Sequence[AttributeAnnotation],
    schema: AttributeSchema,
    min_support: int = 20,
) -> AttributeAP:
    """AP per attribute over an annotated test set.

    Binary attributes rank samples by their logit and score the positive
    class. Categorical attributes rank by per-class log-probability; the AP
    of every class with at least ``min_support`` occurrences is averaged.
    Classes (or binary attributes) below the support are listed in
    ``excluded`` and left out of the means.
    """
    if not annotations:
        raise EvalError("no annotated test samples")
    labels = np.array([a.values for a in annotations], dtype=np.int64)
    per_attr: dict[str, Optional[float]] = {}
    per_class: dict[str, dict[int, float]] = {}
    excluded: dict[str, list[int]] = {}
    for l, spec in enumerate(schema):
        z = np.asarray(attribute_logits[l], dtype=np.float64)
        y = labels[:, l]
        if spec.kind == BINARY:
            if (y == 1).sum() < max(min_support, 1):
                excluded[spec.name] = [1]
                per_attr[spec.name] = None
                continue
            ap = average_precision(z[:, 0], y == 1)
            per_class[spec.name] = {1: ap}
            per_attr[spec.name] = ap
        else:
            logp = _log_softmax(z)
            aps = {}
            for c in range(spec.cardinality):
                if (y == c).sum() >= max(min_support, 1):
                    aps[c] = average_precision(logp[:, c], y == c)
                else:
                    excluded.setdefault(spec.name, []).append(c)
            per_class[spec.name] = aps
            per_attr[spec.name] = float(np.mean(list(aps.values()))) if aps else None
    reported = [v for v in per_attr.values() if v is not None]
    return AttributeAP(per_attr, per_class, excluded, float(np.mean(reported)) if reported else math.nan)


# Reference values from the original full-scale study; they need the real
# datasets and an ImageNet-pretrained ResNet50 and are not reproduced here.
REFERENCE_RANK1 = {"CUHK01": 69.7, "CUHK03": 77.5, "VIPeR": 38.2}
REFERENCE_ATTRIBUTE_AP = {
    "gender": 0.94, "top_length": 0.5, "bottom_length": 0.97, "hair_length": 0.90,
    "hand_bag": 0.21, "other_bag": 0.54, "backpack": 0.81, "bottom_color": 0.64,
    "top_color": 0.80, "mean": 0.70,
}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["cmc", "rank1", "per_attribute_ap", "mean_ap", "trials", "seed", "split"],
    "properties": {
        "cmc": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "rank1": {"type": "number", "minimum": 0, "maximum": 1},
        "per_attribute_ap": {
            "type": "object",
            "additionalProperties": {"type": ["number", "null"]},
        },
        "per_class_ap": {"type": "object"},
        "excluded_classes": {"type": "object"},
        "mean_ap": {"type": ["number", "null"]},
        "trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "split": {"type": "object"},
        "model_digest": {"type": "string"},
    },
}


def build_report(
    curve: CMCCurve,
    attributes: Optional[AttributeAP],
    seed: int,
    split: dict,
    model_digest: str = "",
) -> dict:
    report = {
        "cmc": [float(v) for v in curve.values],
        "rank1": curve.rank1,
        "trials": curve.trials,
        "seed": int(seed),
        "split": split,
        "model_digest": model_digest,
    }
    if attributes is None:
        report.update({"per_attribute_ap": {}, "per_class_ap": {}, "excluded_classes": {}, "mean_ap": None})
    else:
        report.update(attributes.to_dict())
    return report


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)
