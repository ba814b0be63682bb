"""Little-endian named-tensor records shared by weight, checkpoint and store files.

A record is::

    u16 name_len | name (utf-8) | u8 dtype | u8 ndim | u32 dims[ndim] | data

dtype codes: 0 float32, 1 float64, 2 int64, 3 uint8. Files end with a
CRC32 (u32) of every preceding byte.
"""

from __future__ import annotations

import io
import struct
import zlib
from typing import BinaryIO, Iterable

import numpy as np

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class FormatError(ValueError):
    """Unreadable, corrupt or mismatched binary file."""


def dtype_code(dtype) -> int:
    dt = np.dtype(dtype)
    for code, ref in DTYPES.items():
        if dt.kind == ref.kind and dt.itemsize == ref.itemsize:
            return code
    raise FormatError(f"unsupported dtype {dt}")


def write_record(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = dtype_code(array.dtype)
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<BB", code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes())


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("unexpected end of file")
    return data


def read_record(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", read_exact(fh, 2))
    name = read_exact(fh, n).decode("utf-8")
    code, ndim = struct.unpack("<BB", read_exact(fh, 2))
    if code not in DTYPES:
        raise FormatError(f"record {name!r}: unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", read_exact(fh, 4 * ndim))
    dt = DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(read_exact(fh, count * dt.itemsize), dtype=dt).reshape(shape)
    return name, data.astype(dt.newbyteorder("="), copy=True)


def write_records(fh: BinaryIO, records: Iterable[tuple[str, np.ndarray]]) -> None:
    records = list(records)
    fh.write(struct.pack("<I", len(records)))
    for name, arr in records:
        write_record(fh, name, arr)


def read_records(fh: BinaryIO) -> dict[str, np.ndarray]:
    (n,) = struct.unpack("<I", read_exact(fh, 4))
    out = {}
    for _ in range(n):
        name, arr = read_record(fh)
        out[name] = arr
    return out


def seal(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def unseal(blob: bytes, what: str = "file") -> io.BytesIO:
    if len(blob) < 4:
        raise FormatError(f"{what} is truncated")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError(f"{what} is corrupt (checksum mismatch)")
    return io.BytesIO(payload)
