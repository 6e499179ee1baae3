"""Flat binary tensor format and named-tensor checkpoints.

Record layout (little-endian): one magic byte ``0x54``, rank as u32, each
extent as u32, then ``prod(extents)`` float64 values in row-major order.
A checkpoint is a concatenation of records plus a text manifest next to it
(``<path>.manifest``), one ``name<TAB>shape<TAB>byte_offset`` line per tensor.
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Mapping, Union

import numpy as np

from .tensor import Tensor

MAGIC = 0x54
_HEADER = struct.Struct("<BI")
PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    pass


def _as_array(t: Union[Tensor, np.ndarray]) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def write_tensor(fh: BinaryIO, t: Union[Tensor, np.ndarray]) -> int:
    """Write one record; return the number of bytes written."""
    arr = _as_array(t)
    buf = _HEADER.pack(MAGIC, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    fh.write(buf)
    return len(buf)


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, rank = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic byte 0x{magic:02x}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(dims, dtype=np.int64))
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise FormatError(f"truncated tensor body: expected {8 * n} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_to_bytes(t: Union[Tensor, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


def atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_tensor(path: PathLike, t: Union[Tensor, np.ndarray]) -> None:
    atomic_write(Path(path), tensor_to_bytes(t))


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def manifest_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def save_checkpoint(path: PathLike, tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    path = Path(path)
    body, lines, offset = io.BytesIO(), [], 0
    for name, t in tensors.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"tensor name {name!r} contains whitespace separators")
        shape = "x".join(str(n) for n in _as_array(t).shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{offset}")
        offset += write_tensor(body, t)
    atomic_write(path, body.getvalue())
    atomic_write(manifest_path(path), ("\n".join(lines) + "\n").encode())


def load_checkpoint(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    raw = path.read_bytes()
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for line in manifest_path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split("\t")
        arr = read_tensor(io.BytesIO(raw[int(offset):]))
        expected = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
        if arr.shape != expected:
            raise FormatError(f"{name}: manifest says {expected}, record holds {arr.shape}")
        out[name] = arr
    return out
