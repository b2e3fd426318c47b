"""Little-endian binary primitives shared by the checkpoint and dataset files.

A named array record is laid out as::

    u32 name_length | name (UTF-8) | u32 ndim | u32 extent * ndim | f64 values (row-major)
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterator, Mapping

import numpy as np

from .errors import FormatError


def write_u8(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<B", v))


def write_u32(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<I", v))


def write_u64(f: BinaryIO, v: int) -> None:
    f.write(struct.pack("<Q", v))


def _read(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"unexpected end of file (wanted {n} bytes, got {len(b)})")
    return b


def read_u8(f: BinaryIO) -> int:
    return struct.unpack("<B", _read(f, 1))[0]


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read(f, 4))[0]


def read_u64(f: BinaryIO) -> int:
    return struct.unpack("<Q", _read(f, 8))[0]


def write_f64s(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_f64s(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    return np.frombuffer(_read(f, 8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def write_text(f: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(f, len(raw))
    f.write(raw)


def read_text(f: BinaryIO) -> str:
    return _read(f, read_u32(f)).decode("utf-8")


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {got!r}")


def write_records(f: BinaryIO, arrays: Mapping[str, np.ndarray]) -> None:
    write_u32(f, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        write_text(f, name)
        write_u32(f, arr.ndim)
        for n in arr.shape:
            write_u32(f, n)
        write_f64s(f, arr)


def iter_records(f: BinaryIO) -> Iterator[tuple[str, np.ndarray]]:
    for _ in range(read_u32(f)):
        name = read_text(f)
        shape = tuple(read_u32(f) for _ in range(read_u32(f)))
        yield name, read_f64s(f, shape)
