"""Signature extraction, cosine distance and gallery ranking.

Store file layout (little-endian)::

    magic "MTRS" | u32 version | u64 M | u32 D | 32-byte model digest
    float32 vectors[M * D] (row-major)
    int64 sample_ids[M] | int64 global_identities[M] | int64 camera_ids[M]
    u32 CRC32 of all preceding bytes
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import binio
from .data.types import Sample

STORE_MAGIC = b"MTRS"
STORE_VERSION = 1


class MatchError(ValueError):
    pass


def _norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt((m * m).sum(axis=-1))


def cosine_distances(probe, gallery) -> np.ndarray:
    """``1 - <a, b> / (|a| |b|)`` of one probe against each gallery row, in float64.

    Row reductions are elementwise products summed along the last axis so a
    single pair evaluates bit-identically to the same pair inside a gallery.
    """
    a = np.asarray(probe, dtype=np.float64)
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if a.ndim != 1 or g.shape[1] != a.shape[0]:
        raise MatchError(f"dimension mismatch: probe {a.shape}, gallery {g.shape}")
    na = _norms(a)
    ng = _norms(g)
    if na == 0.0 or np.any(ng == 0.0):
        raise MatchError("zero-norm signature: cosine distance undefined")
    # rounding can push the quotient a hair outside [-1, 1]
    return np.clip(1.0 - (g * a).sum(axis=-1) / (ng * na), 0.0, 2.0)


def cosine_distance(a, b) -> float:
    return float(cosine_distances(a, np.asarray(b)[None, :])[0])


@dataclass(frozen=True, eq=False)
class SignatureStore:
    vectors: np.ndarray
    sample_ids: np.ndarray
    global_identities: np.ndarray
    camera_ids: np.ndarray
    model_digest: bytes = b"\x00" * 32

    def __post_init__(self) -> None:
        m = self.vectors.shape[0]
        if self.vectors.ndim != 2:
            raise MatchError("vectors must be M x D")
        if not (len(self.sample_ids) == len(self.global_identities) == len(self.camera_ids) == m):
            raise MatchError("store arrays have different lengths")
        if len(self.model_digest) != 32:
            raise MatchError("model digest must be 32 bytes")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row_of(self) -> dict[int, int]:
        return {int(s): i for i, s in enumerate(self.sample_ids)}

    def subset(self, sample_ids: Sequence[int]) -> "SignatureStore":
        rows = self.row_of()
        try:
            idx = np.array([rows[int(s)] for s in sample_ids], dtype=np.int64)
        except KeyError as exc:
            raise MatchError(f"sample {exc.args[0]} has no signature") from None
        return SignatureStore(
            self.vectors[idx], self.sample_ids[idx], self.global_identities[idx],
            self.camera_ids[idx], self.model_digest,
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(STORE_MAGIC)
        buf.write(struct.pack("<IQI", STORE_VERSION, len(self), self.dim))
        buf.write(self.model_digest)
        buf.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
        for arr in (self.sample_ids, self.global_identities, self.camera_ids):
            buf.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        return binio.seal(buf.getvalue())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SignatureStore":
        fh = binio.unseal(blob, "signature store")
        if binio.read_exact(fh, 4) != STORE_MAGIC:
            raise binio.FormatError("not a signature store (bad magic)")
        version, m, d = struct.unpack("<IQI", binio.read_exact(fh, 16))
        if version != STORE_VERSION:
            raise binio.FormatError(f"unsupported store version {version}")
        digest = binio.read_exact(fh, 32)
        vectors = np.frombuffer(binio.read_exact(fh, 4 * m * d), dtype="<f4").reshape(m, d)
        tables = [np.frombuffer(binio.read_exact(fh, 8 * m), dtype="<i8") for _ in range(3)]
        return cls(
            vectors.astype(np.float32),
            *(t.astype(np.int64) for t in tables),
            model_digest=digest,
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SignatureStore":
        return cls.from_bytes(Path(path).read_bytes())


def extract(model, samples: Sequence[Sample], batch_size: int = 256) -> SignatureStore:
    """Eval-mode FC1 signatures, one row per sample in input order."""
    chunks = []
    for start in range(0, len(samples), batch_size):
        part = samples[start:start + batch_size]
        out = model.forward(np.stack([s.image for s in part]), mode="eval")
        chunks.append(out.signatures.detach().cpu().numpy().astype(np.float32))
    dim = model.config.signature_dim
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, dim), dtype=np.float32)
    ids = [s.sample_id if s.sample_id >= 0 else i for i, s in enumerate(samples)]
    return SignatureStore(
        vectors=vectors,
        sample_ids=np.array(ids, dtype=np.int64),
        global_identities=np.array([s.global_identity for s in samples], dtype=np.int64),
        camera_ids=np.array([s.camera_id for s in samples], dtype=np.int64),
        model_digest=model.config.digest(),
    )


@dataclass(frozen=True)
class RankedResult:
    probe_id: int
    gallery_ids: np.ndarray
    distances: np.ndarray


def rank(probe, gallery: SignatureStore, probe_id: int = -1) -> RankedResult:
    """Gallery sorted by ascending cosine distance; ties keep gallery order."""
    if len(gallery) == 0:
        raise MatchError("empty gallery")
    d = cosine_distances(probe, gallery.vectors)
    order = np.argsort(d, kind="stable")
    return RankedResult(int(probe_id), gallery.sample_ids[order], d[order])
