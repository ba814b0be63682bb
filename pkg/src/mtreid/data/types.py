"""Core data records shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

BINARY = "binary"
CATEGORICAL = "categorical"


class DataError(ValueError):
    """Raised for malformed datasets, manifests or registrations."""


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: str
    cardinality: int

    @property
    def head_width(self) -> int:
        # binary attributes are scored with one sigmoid logit
        return 1 if self.kind == BINARY else self.cardinality


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered list of pedestrian attributes predicted by the attribute heads."""

    entries: tuple[AttributeSpec, ...]

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DataError(f"attribute names must be unique: {names}")
        for e in self.entries:
            if e.kind == BINARY and e.cardinality != 2:
                raise DataError(f"binary attribute {e.name!r} must have cardinality 2")
            if e.kind == CATEGORICAL and e.cardinality < 2:
                raise DataError(f"categorical attribute {e.name!r} needs cardinality >= 2")
            if e.kind not in (BINARY, CATEGORICAL):
                raise DataError(f"unknown attribute kind {e.kind!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def head_widths(self) -> list[int]:
        return [e.head_width for e in self.entries]

    def index(self, name: str) -> int:
        for i, e in enumerate(self.entries):
            if e.name == name:
                return i
        raise DataError(f"attribute {name!r} not in schema")

    def to_list(self) -> list[list]:
        return [[e.name, e.kind, e.cardinality] for e in self.entries]

    @classmethod
    def from_list(cls, rows: Sequence[Sequence]) -> "AttributeSchema":
        return cls(tuple(AttributeSpec(str(n), str(k), int(c)) for n, k, c in rows))

    @classmethod
    def default(cls) -> "AttributeSchema":
        return DEFAULT_SCHEMA


TOP_COLORS = ("black", "blue", "green", "grey", "purple", "red", "white", "yellow")
BOTTOM_COLORS = ("black", "blue", "brown", "grey", "green", "pink", "purple", "white", "yellow")

DEFAULT_SCHEMA = AttributeSchema(
    (
        AttributeSpec("gender", BINARY, 2),
        AttributeSpec("top_color", CATEGORICAL, len(TOP_COLORS)),
        AttributeSpec("bottom_color", CATEGORICAL, len(BOTTOM_COLORS)),
        AttributeSpec("top_length", BINARY, 2),
        AttributeSpec("bottom_length", BINARY, 2),
        AttributeSpec("backpack", BINARY, 2),
        AttributeSpec("hand_bag", BINARY, 2),
        AttributeSpec("other_bag", BINARY, 2),
        AttributeSpec("hair_length", BINARY, 2),
    )
)


@dataclass(frozen=True)
class AttributeAnnotation:
    values: tuple[int, ...]

    def validate(self, schema: AttributeSchema) -> None:
        if len(self.values) != len(schema):
            raise DataError(
                f"annotation has {len(self.values)} values, schema has {len(schema)}"
            )
        for v, e in zip(self.values, schema):
            if not 0 <= v < e.cardinality:
                raise DataError(f"attribute {e.name!r} value {v} outside [0, {e.cardinality})")


@dataclass(frozen=True)
class DatasetDescriptor:
    dataset_id: int
    name: str
    num_identities: int
    has_attributes: bool
    camera_count: int

    def __post_init__(self) -> None:
        if self.num_identities <= 0:
            raise DataError(f"dataset {self.name!r}: num_identities must be positive")
        if self.camera_count <= 0:
            raise DataError(f"dataset {self.name!r}: camera_count must be positive")


@dataclass(frozen=True, eq=False)
class Sample:
    """One image. ``image`` is H x W x C float32 in [0, 1]."""

    image: np.ndarray
    local_identity: int
    dataset_id: int
    camera_id: int
    global_identity: int = -1
    attributes: Optional[AttributeAnnotation] = None
    split: str = "train"
    sample_id: int = -1


@dataclass
class Batch:
    images: np.ndarray
    global_identities: np.ndarray
    attribute_mask: np.ndarray
    attribute_labels: list[Optional[AttributeAnnotation]] = field(default_factory=list)
    sample_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.global_identities)
