from .manifest import ManifestError, load_manifest, write_manifest
from .registry import DatasetRegistry, EpochSampler, make_batch, register, sample_batch
from .synthetic import SyntheticConfig, generate_synthetic
from .types import (
    DEFAULT_SCHEMA,
    AttributeAnnotation,
    AttributeSchema,
    AttributeSpec,
    Batch,
    DataError,
    DatasetDescriptor,
    Sample,
)
