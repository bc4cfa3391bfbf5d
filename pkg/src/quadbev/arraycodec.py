"""Length-prefixed named-array binary records shared by datasets and checkpoints.

Layout (little-endian)::

    magic[4] | u32 version | u32 n_arrays | n_arrays x array
    array := u16 name_len | name (utf-8) | u8 dtype tag | u8 rank | u32 dims[rank] | payload
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("<u1"), 4: np.dtype("<i8")}
TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


class RecordError(ValueError):
    """Base class for malformed binary records."""


class BadMagicError(RecordError):
    pass


class VersionMismatchError(RecordError):
    pass


class TruncatedRecordError(RecordError):
    pass


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedRecordError(f"truncated while reading {what}")
    return data


def encode(magic: bytes, version: int, arrays: dict[str, np.ndarray], header: bytes = b"") -> bytes:
    """``header`` is spliced in between the version and the array count."""
    return magic + struct.pack("<I", version) + header + encode_arrays(arrays)


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in TAG_OF:
            raise TypeError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", TAG_OF[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def read_header(f: BinaryIO, magic: bytes, version: int) -> None:
    head = f.read(len(magic))
    if head != magic:
        raise BadMagicError(f"bad magic {head!r}, expected {magic!r}")
    (ver,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if ver != version:
        raise VersionMismatchError(f"format version {ver}, expected {version}")


def read_u32(f: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def decode(f: BinaryIO, magic: bytes, version: int) -> dict[str, np.ndarray]:
    read_header(f, magic, version)
    return decode_arrays(f)


def decode_arrays(f: BinaryIO) -> dict[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(f, 4, "array count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, ln, "name").decode("utf-8")
        tag, rank = struct.unpack("<BB", _read_exact(f, 2, f"{name} header"))
        if tag not in DTYPE_TAGS:
            raise RecordError(f"unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"{name} dims"))
        dt = DTYPE_TAGS[tag]
        count = int(np.prod(dims)) if rank else 1
        buf = _read_exact(f, count * dt.itemsize, f"{name} payload")
        out[name] = np.frombuffer(buf, dtype=dt).reshape(dims).copy()
    return out
