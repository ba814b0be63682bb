"""JSON-lines manifests describing one dataset on disk.

Line 1 is a header object::

    {"dataset": "viper", "num_identities": 632, "has_attributes": false, "cameras": 2}

Every further line is one image::

    {"image_path": "img/0001_c0.png", "identity": 1, "camera": 0, "split": "train",
     "attributes": {"gender": 1, "top_color": 3, ...}}

``image_path`` is relative to the manifest's directory; ``attributes`` is
optional and only allowed when the header declares ``has_attributes``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .types import (
    AttributeAnnotation,
    AttributeSchema,
    DataError,
    DatasetDescriptor,
    Sample,
    DEFAULT_SCHEMA,
)

HEADER_KEYS = {"dataset", "num_identities", "has_attributes", "cameras"}
LINE_KEYS = {"image_path", "identity", "camera", "split", "attributes"}


class ManifestError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1]."""
    return pixels.astype(np.float32) / np.float32(255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _decode(path: Path, size: Optional[tuple[int, int]]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return to_unit(np.asarray(im))


def load_manifest(
    path: Union[str, Path],
    image_size: Optional[tuple[int, int]] = None,
    schema: AttributeSchema = DEFAULT_SCHEMA,
    dataset_id: Optional[int] = None,
) -> tuple[DatasetDescriptor, list[Sample]]:
    path = Path(path)
    root = path.parent
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines()]
    rows = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not rows:
        raise ManifestError(path, 1, "no samples (empty manifest)")

    lineno, first = rows[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise ManifestError(path, lineno, f"malformed header: {exc}") from None
    missing = HEADER_KEYS - header.keys() if isinstance(header, dict) else HEADER_KEYS
    if missing:
        raise ManifestError(path, lineno, f"header missing {sorted(missing)}")
    try:
        desc = DatasetDescriptor(
            dataset_id=int(header.get("dataset_id", 0) if dataset_id is None else dataset_id),
            name=str(header["dataset"]),
            num_identities=int(header["num_identities"]),
            has_attributes=bool(header["has_attributes"]),
            camera_count=int(header["cameras"]),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(path, lineno, str(exc)) from None

    if len(rows) == 1:
        raise ManifestError(path, lineno, "no samples")

    samples = []
    for lineno, text in rows[1:]:
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(path, lineno, f"malformed line: {exc}") from None
        if not isinstance(rec, dict):
            raise ManifestError(path, lineno, "expected a JSON object")
        unknown = rec.keys() - LINE_KEYS
        if unknown:
            raise ManifestError(path, lineno, f"unknown fields {sorted(unknown)}")
        for key in ("image_path", "identity", "camera", "split"):
            if key not in rec:
                raise ManifestError(path, lineno, f"missing field {key!r}")
        if rec["split"] not in ("train", "test"):
            raise ManifestError(path, lineno, f"split must be 'train' or 'test', got {rec['split']!r}")
        identity, camera = rec["identity"], rec["camera"]
        if not isinstance(identity, int) or not 0 <= identity < desc.num_identities:
            raise ManifestError(path, lineno, f"identity {identity!r} outside [0, {desc.num_identities})")
        if not isinstance(camera, int) or not 0 <= camera < desc.camera_count:
            raise ManifestError(path, lineno, f"camera {camera!r} outside [0, {desc.camera_count})")

        annotation = None
        if "attributes" in rec:
            if not desc.has_attributes:
                raise ManifestError(path, lineno, "attributes given but dataset has_attributes is false")
            attrs = rec["attributes"]
            if not isinstance(attrs, dict) or set(attrs) != set(schema.names):
                raise ManifestError(path, lineno, f"attributes must map exactly {schema.names}")
            values = tuple(attrs[n] for n in schema.names)
            annotation = AttributeAnnotation(values)
            try:
                annotation.validate(schema)
            except DataError as exc:
                raise ManifestError(path, lineno, str(exc)) from None

        img_path = root / rec["image_path"]
        if not img_path.is_file():
            raise ManifestError(path, lineno, f"image file not found: {img_path}")
        try:
            image = _decode(img_path, image_size)
        except OSError as exc:
            raise ManifestError(path, lineno, f"cannot decode {img_path}: {exc}") from None
        samples.append(
            Sample(
                image=image,
                local_identity=identity,
                dataset_id=desc.dataset_id,
                camera_id=camera,
                global_identity=identity,
                attributes=annotation,
                split=rec["split"],
            )
        )
    return desc, samples


def write_manifest(
    path: Union[str, Path],
    descriptor: DatasetDescriptor,
    samples: Sequence[Sample],
    schema: AttributeSchema = DEFAULT_SCHEMA,
    image_dir: str = "images",
) -> Path:
    """Write PNGs plus a manifest that ``load_manifest`` reads back."""
    path = Path(path)
    img_root = path.parent / image_dir
    img_root.mkdir(parents=True, exist_ok=True)
    header = {
        "dataset": descriptor.name,
        "dataset_id": descriptor.dataset_id,
        "num_identities": descriptor.num_identities,
        "has_attributes": descriptor.has_attributes,
        "cameras": descriptor.camera_count,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i, s in enumerate(samples):
        rel = f"{image_dir}/{descriptor.name}_{i:06d}_id{s.local_identity}_c{s.camera_id}.png"
        Image.fromarray(to_uint8(s.image)).save(path.parent / rel, optimize=False)
        rec = {
            "image_path": rel,
            "identity": s.local_identity,
            "camera": s.camera_id,
            "split": s.split,
        }
        if s.attributes is not None:
            rec["attributes"] = dict(zip(schema.names, s.attributes.values))
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
