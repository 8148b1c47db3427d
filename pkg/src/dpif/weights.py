"""Binary weight container.

Layout (all integers little-endian)::

    magic        8 bytes   b"DPIFWT01"  ("DPIFWT" + 2-digit format version)
    count        uint32    number of tensor records
    meta_len     uint32    length of the metadata blob
    meta         bytes     UTF-8 JSON object (provenance, model header, ...)
    record * count:
        name_len uint32
        name     UTF-8 bytes
        dtype    uint8     0 = float32, 1 = float64
        rank     uint8
        extents  uint64 * rank
        payload  row-major little-endian values
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

MAGIC_PREFIX = b"DPIFWT"
FORMAT_VERSION = 1
MAGIC = MAGIC_PREFIX + b"%02d" % FORMAT_VERSION

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class WeightFormatError(ValueError):
    """Base class for weight-container decoding failures."""


class BadMagicError(WeightFormatError):
    pass


class UnsupportedVersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class RecordError(WeightFormatError):
    """Malformed record: unknown dtype, duplicate name, trailing bytes, ..."""


class MissingWeightError(KeyError):
    """A layer required by a model has no entry (or a mis-shaped one)."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing weight"


@dataclass
class WeightStore:
    """Ordered map of hierarchical names to arrays plus free-form metadata."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"{name}: only float32/float64 tensors are storable, got {arr.dtype}")
        self.entries[name] = arr

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def require(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in self.entries:
            raise MissingWeightError(f"weight store has no entry for layer {name!r}")
        arr = self.entries[name]
        if tuple(arr.shape) != tuple(shape):
            raise MissingWeightError(
                f"layer {name!r} expects shape {tuple(shape)}, store has {tuple(arr.shape)}")
        return arr

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], **metadata) -> "WeightStore":
        store = cls(metadata=dict(metadata))
        for k, v in arrays.items():
            store[k] = v
        return store


def encode_weight_store(store: WeightStore) -> bytes:
    meta = json.dumps(store.metadata, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", len(store.entries), len(meta)), meta]
    for name, arr in store.entries.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _DTYPE_CODES.get(np.dtype(le.dtype))
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(le).tobytes(order="C"))
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file truncated while reading {what} at byte {self.pos} "
                f"(need {n}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weight_store(buf: bytes) -> WeightStore:
    r = _Reader(buf)
    if len(buf) < len(MAGIC) and MAGIC.startswith(bytes(buf)):
        raise TruncatedFileError(f"file truncated inside the magic ({len(buf)} bytes)")
    magic = bytes(r.take(len(MAGIC), "magic")) if len(buf) >= len(MAGIC) else bytes(buf)
    if not magic.startswith(MAGIC_PREFIX):
        raise BadMagicError(f"bad magic {magic!r}; expected {MAGIC!r}")
    if magic != MAGIC:
        raise UnsupportedVersionError(
            f"unsupported weight format version {magic[len(MAGIC_PREFIX):]!r}; "
            f"this reader understands {FORMAT_VERSION:02d}")
    count, meta_len = r.unpack("<II", "header")
    try:
        metadata = json.loads(bytes(r.take(meta_len, "metadata")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RecordError(f"metadata block is not valid UTF-8 JSON: {exc}") from None
    store = WeightStore(metadata=metadata)
    for i in range(count):
        (name_len,) = r.unpack("<I", f"record {i} name length")
        try:
            name = bytes(r.take(name_len, f"record {i} name")).decode("utf-8")
        except UnicodeDecodeError:
            raise RecordError(f"record {i}: name is not valid UTF-8") from None
        code, rank = r.unpack("<BB", f"record {name!r} header")
        if code not in _CODE_DTYPES:
            raise RecordError(f"record {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q", f"record {name!r} extents")
        if any(s == 0 for s in shape):
            raise RecordError(f"record {name!r}: zero extent in shape {shape}")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"record {name!r} payload")
        if name in store.entries:
            raise RecordError(f"duplicate record name {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        store.entries[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.pos != len(buf):
        raise RecordError(f"{len(buf) - r.pos} trailing bytes after {count} records")
    return store


def save_weight_store(store: WeightStore, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_weight_store(store))
    os.replace(tmp, path)


def load_weight_store(path: str | os.PathLike) -> WeightStore:
    return decode_weight_store(Path(path).read_bytes())
