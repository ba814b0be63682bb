"""Merging several identity datasets into one training universe."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .types import AttributeSchema, Batch, DataError, DatasetDescriptor, Sample, DEFAULT_SCHEMA


@dataclass(frozen=True, eq=False)
class DatasetRegistry:
    """Registered datasets with disjoint global identities.

    ``samples`` holds the training split only; held-out images are kept in
    ``test_samples`` with their global identities assigned the same way.
    """

    descriptors: tuple[DatasetDescriptor, ...]
    samples: tuple[Sample, ...]
    test_samples: tuple[Sample, ...]
    class_counts: dict[int, int]
    offsets: dict[int, int]
    schema: AttributeSchema = DEFAULT_SCHEMA

    @property
    def total_identities(self) -> int:
        return sum(d.num_identities for d in self.descriptors)

    def descriptor(self, dataset_id: int) -> DatasetDescriptor:
        for d in self.descriptors:
            if d.dataset_id == dataset_id:
                return d
        raise KeyError(dataset_id)

    def identity_range(self, dataset_id: int) -> range:
        off = self.offsets[dataset_id]
        return range(off, off + self.descriptor(dataset_id).num_identities)

    def count_vector(self) -> np.ndarray:
        """Training image count per global identity (0 for unseen classes)."""
        counts = np.zeros(self.total_identities, dtype=np.int64)
        for k, c in self.class_counts.items():
            counts[k] = c
        return counts

    def attribute_counts(self) -> list[np.ndarray]:
        """Per attribute, occurrences of each class among annotated training samples."""
        counts = [np.zeros(e.cardinality, dtype=np.int64) for e in self.schema]
        for s in self.samples:
            if s.attributes is not None:
                for l, v in enumerate(s.attributes.values):
                    counts[l][v] += 1
        return counts

    def signature(self) -> dict:
        """Content summary used to compare registries built from different sources."""
        def rows(samples):
            return [
                (s.dataset_id, s.local_identity, s.global_identity, s.camera_id,
                 s.attributes.values if s.attributes else None, s.split)
                for s in samples
            ]
        return {
            "descriptors": [dataclasses.astuple(d) for d in self.descriptors],
            "offsets": dict(self.offsets),
            "class_counts": dict(self.class_counts),
            "train": rows(self.samples),
            "test": rows(self.test_samples),
        }


def register(
    datasets: Iterable[tuple[DatasetDescriptor, Sequence[Sample]]],
    schema: AttributeSchema = DEFAULT_SCHEMA,
) -> DatasetRegistry:
    """Assign global identities by cumulative offset in registration order."""
    descriptors: list[DatasetDescriptor] = []
    offsets: dict[int, int] = {}
    train: list[Sample] = []
    test: list[Sample] = []
    offset = 0
    next_id = 0
    for desc, samples in datasets:
        if desc.dataset_id in offsets:
            raise DataError(f"duplicate dataset_id {desc.dataset_id}")
        offsets[desc.dataset_id] = offset
        descriptors.append(desc)
        for s in samples:
            if s.dataset_id != desc.dataset_id:
                raise DataError(
                    f"sample belongs to dataset {s.dataset_id}, registered under {desc.dataset_id}"
                )
            if not 0 <= s.local_identity < desc.num_identities:
                raise DataError(
                    f"dataset {desc.name!r}: local identity {s.local_identity} "
                    f"outside [0, {desc.num_identities})"
                )
            if s.attributes is not None:
                if not desc.has_attributes:
                    raise DataError(f"dataset {desc.name!r} has no attributes but sample is annotated")
                s.attributes.validate(schema)
            placed = dataclasses.replace(
                s, global_identity=offset + s.local_identity, sample_id=next_id
            )
            next_id += 1
            (train if s.split == "train" else test).append(placed)
        offset += desc.num_identities
    counts = Counter(s.global_identity for s in train)
    return DatasetRegistry(
        descriptors=tuple(descriptors),
        samples=tuple(train),
        test_samples=tuple(test),
        class_counts=dict(sorted(counts.items())),
        offsets=offsets,
        schema=schema,
    )


def make_batch(samples: Sequence[Sample]) -> Batch:
    labels = [s.attributes for s in samples]
    return Batch(
        images=np.stack([s.image for s in samples]).astype(np.float32, copy=False),
        global_identities=np.array([s.global_identity for s in samples], dtype=np.int64),
        attribute_mask=np.array([a is not None for a in labels], dtype=bool),
        attribute_labels=labels,
        sample_ids=np.array([s.sample_id for s in samples], dtype=np.int64),
    )


def sample_batch(registry: DatasetRegistry, batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw one batch uniformly without replacement."""
    if not registry.samples:
        raise DataError("registry has no training samples")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = min(batch_size, len(registry.samples))
    idx = rng.permutation(len(registry.samples))[:n]
    return make_batch([registry.samples[i] for i in idx])


@dataclass
class EpochSampler:
    """Seeded epoch-wise permutation over the training samples.

    Every sample appears exactly once per epoch; the last batch of an epoch
    may be short.
    """

    registry: DatasetRegistry
    batch_size: int
    seed: int
    epoch: int = 0
    position: int = 0
    _order: Optional[np.ndarray] = field(default=None, repr=False)
    _rng: Optional[np.random.Generator] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.registry.samples:
            raise DataError("registry has no training samples")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self._rng = np.random.default_rng(self.seed)
        self._order = self._rng.permutation(len(self.registry.samples))

    def _roll_epoch(self) -> None:
        if self.position >= len(self.registry.samples):
            self.epoch += 1
            self.position = 0
            self._order = self._rng.permutation(len(self.registry.samples))

    def next_indices(self) -> np.ndarray:
        self._roll_epoch()
        idx = self._order[self.position:self.position + self.batch_size]
        self.position += len(idx)
        return idx

    def next_batch(self) -> Batch:
        return make_batch([self.registry.samples[i] for i in self.next_indices()])

    def epoch_batches(self) -> Iterable[Batch]:
        """Batches for the remainder of the current epoch (a fresh one if it is exhausted)."""
        self._roll_epoch()
        while self.position < len(self.registry.samples):
            yield self.next_batch()

    def state(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "seed": self.seed,
            "epoch": self.epoch,
            "position": self.position,
            "order": self._order.tolist(),
            "rng": self._rng.bit_generator.state,
        }

    def load_state(self, state: dict) -> None:
        if state["batch_size"] != self.batch_size:
            raise DataError(
                f"sampler batch_size {state['batch_size']} does not match {self.batch_size}"
            )
        self.seed = state["seed"]
        self.epoch = state["epoch"]
        self.position = state["position"]
        self._order = np.asarray(state["order"], dtype=np.int64)
        self._rng.bit_generator.state = state["rng"]
