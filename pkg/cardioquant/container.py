"""Read and write the CQT1 tensor container.

Layout (all integers little-endian):

- 4 bytes magic ``CQT1``
- uint32 tensor count
- per tensor: uint32 name length, UTF-8 name, uint32 rank, one uint64
  extent per axis, then ``prod(extents)`` float32 values
"""
from __future__ import annotations

import struct
from collections.abc import Mapping
from os import PathLike

import numpy as np

MAGIC = b"CQT1"
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_FLOAT = np.dtype("<f4")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialise named arrays into container bytes, in mapping order."""
    chunks = [MAGIC, _U32.pack(len(tensors))]
    for name, array in tensors.items():
        values = np.asarray(array)
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(values.ndim))
        chunks.extend(_U64.pack(extent) for extent in values.shape)
        chunks.append(np.ascontiguousarray(values, dtype=_FLOAT).tobytes())
    return b"".join(chunks)


class _Reader:
    """Cursor over container bytes that reports where decoding failed."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            msg = (
                f"Truncated container while reading {what} at byte offset "
                f"{self.offset}"
            )
            raise ContainerError(msg, self.offset)
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(_U32.size, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(_U64.size, what))[0]


def decode_tensors(payload: bytes) -> dict[str, np.ndarray]:
    """Parse container bytes back into named float32 arrays.

    Raises
    ------
    ContainerError
        On a bad magic, truncation, duplicate names or undecodable names.
        The exception carries the byte offset of the failure.
    """
    reader = _Reader(payload)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        msg = "Bad magic at byte offset 0 (not a CQT1 container)"
        raise ContainerError(msg, 0)
    count = reader.u32("tensor count")
    tensors = {}
    for _ in range(count):
        start = reader.offset
        name_bytes = reader.take(reader.u32("name length"), "name")
        try:
            name = name_bytes.decode("utf-8")
        except UnicodeDecodeError as err:
            msg = f"Tensor name is not UTF-8 at byte offset {start}"
            raise ContainerError(msg, start) from err
        if name in tensors:
            msg = f"Duplicate tensor {name!r} at byte offset {start}"
            raise ContainerError(msg, start)
        rank = reader.u32(f"rank of {name}")
        shape = tuple(reader.u64(f"extents of {name}") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(size * _FLOAT.itemsize, f"values of {name}")
        tensors[name] = (
            np.frombuffer(raw, dtype=_FLOAT).astype(np.float32).reshape(shape)
        )
    if reader.offset != len(payload):
        msg = (
            f"Trailing bytes after last tensor at byte offset {reader.offset}"
        )
        raise ContainerError(msg, reader.offset)
    return tensors


def write_tensors(
    path: PathLike[str] | str,
    tensors: Mapping[str, np.ndarray],
):
    """Write named arrays to ``path`` as a CQT1 container."""
    with open(path, "wb") as container_file:
        container_file.write(encode_tensors(tensors))


def read_tensors(path: PathLike[str] | str) -> dict[str, np.ndarray]:
    """Read every tensor of the CQT1 container at ``path``."""
    with open(path, "rb") as container_file:
        return decode_tensors(container_file.read())


class ContainerError(Exception):
    """Exception raised when a container cannot be decoded."""

    def __init__(self, msg: str, offset: int):
        super().__init__(msg)
        self.offset = offset
