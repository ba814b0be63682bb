import numpy as np
import pytest

from mtreid.data import DatasetDescriptor, Sample, SyntheticConfig, generate_synthetic, register


def blank_samples(dataset_id, n_ids, per_id=2, cameras=2, size=(8, 4), annotate=None, split="train"):
    out = []
    for ident in range(n_ids):
        for k in range(per_id):
            out.append(Sample(
                image=np.full(size + (3,), 0.5, dtype=np.float32),
                local_identity=ident,
                dataset_id=dataset_id,
                camera_id=k % cameras,
                attributes=annotate(ident) if annotate else None,
                split=split,
            ))
    return out


def descriptor(dataset_id, n_ids, has_attributes=False, cameras=2, name=None):
    return DatasetDescriptor(dataset_id, name or f"d{dataset_id}", n_ids, has_attributes, cameras)


@pytest.fixture(scope="session")
def tiny_config():
    return SyntheticConfig(num_datasets=3, identities_per_dataset=3, images_per_identity=6, image_size=(16, 8))


@pytest.fixture(scope="session")
def tiny_registry(tiny_config):
    return register(generate_synthetic(tiny_config, seed=0))
