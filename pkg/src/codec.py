"""
Binary layout shared by the prototype and model files.

    magic (8 bytes) | version u32 | K, L, D u64 | n_scalars u32 | scalars f64...
    | table_len u64 | table (UTF-8 JSON) | arrays as little-endian f64, row-major
"""

import json
import struct
from dataclasses import dataclass
from typing import Any, BinaryIO, Sequence

import numpy as np

from dtw_core import FloatArray

MAGIC_LEN = 8


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Header:
    version: int
    shape: tuple[int, int, int]
    scalars: tuple[float, ...]
    table: Any


def write_header(
    f: BinaryIO,
    magic: bytes,
    version: int,
    shape: tuple[int, int, int],
    scalars: Sequence[float],
    table: Any,
) -> None:
    if len(magic) != MAGIC_LEN:
        raise CodecError(f"Magic must be {MAGIC_LEN} bytes, got {magic!r}")
    f.write(magic)
    f.write(struct.pack("<I", version))
    f.write(struct.pack("<3Q", *shape))
    f.write(struct.pack("<I", len(scalars)))
    f.write(struct.pack(f"<{len(scalars)}d", *scalars))
    blob = json.dumps(table, sort_keys=True, separators=(",", ":")).encode("utf-8")
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)


def _read_exact(f: BinaryIO, n: int, exc: type[CodecError]) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise exc(f"File truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def read_header(f: BinaryIO, magic: bytes, exc: type[CodecError] = CodecError) -> Header:
    found = _read_exact(f, MAGIC_LEN, exc)
    if found != magic:
        raise exc(f"Bad magic {found!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, exc))
    shape = struct.unpack("<3Q", _read_exact(f, 24, exc))
    (n_scalars,) = struct.unpack("<I", _read_exact(f, 4, exc))
    scalars = struct.unpack(f"<{n_scalars}d", _read_exact(f, 8 * n_scalars, exc))
    (table_len,) = struct.unpack("<Q", _read_exact(f, 8, exc))
    try:
        table = json.loads(_read_exact(f, table_len, exc).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise exc(f"Unreadable class table: {e}") from None
    return Header(version, (shape[0], shape[1], shape[2]), tuple(scalars), table)


def write_array(f: BinaryIO, arr: FloatArray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_array(
    f: BinaryIO, shape: tuple[int, ...], exc: type[CodecError] = CodecError
) -> FloatArray:
    n = int(np.prod(shape))
    buf = _read_exact(f, 8 * n, exc)
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)


def encode_class_table(
    classes: Sequence[Any], class_index: dict[Any, tuple[int, ...]]
) -> list[list[Any]]:
    # JSON object keys are strings only, so keep labels as list entries
    return [[c, list(class_index[c])] for c in classes]


def decode_class_table(
    table: Any, exc: type[CodecError] = CodecError
) -> tuple[tuple[Any, ...], dict[Any, tuple[int, ...]]]:
    try:
        classes = tuple(row[0] for row in table)
        index = {row[0]: tuple(int(i) for i in row[1]) for row in table}
    except (TypeError, IndexError, ValueError) as e:
        raise exc(f"Malformed class table: {e}") from None
    return classes, index
