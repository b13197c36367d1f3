"""Portable binary tensor files and checkpoint containers.

Tensor format (MCDT), little-endian throughout:

    offset  size  field
    0       4     magic "MCDT"
    4       1     version (1)
    5       1     dtype code: 1 = float32, 2 = float64
    6       1     rank
    7       1     pad (0)
    8       8     reserved (0)          -> 16-byte header total
    16      4*r   dims, uint32 each
    ...           payload, row-major

Checkpoint format (MCKP): magic "MCKP", version byte, 3 pad bytes, 32-byte
SHA-256 config hash, a uint32-length JSON metadata block, then a uint32 count
of named tensors, each stored as uint16 name length + UTF-8 name + an
embedded MCDT record.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"MCDT"
CKPT_MAGIC = b"MCKP"
TENSOR_VERSION = 1
CKPT_VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_MAX_DIM = 2 ** 32 - 1
_MAX_ELEMENTS = 2 ** 48


class FormatError(ValueError):
    """Malformed or truncated MCDT/MCKP data."""


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(data)}")
    return data


def write_tensor_stream(stream: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODE_FOR:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    for dim in arr.shape:
        if dim > _MAX_DIM:
            raise FormatError(f"dim overflow: {dim} exceeds uint32 range")
    header = TENSOR_MAGIC + struct.pack("<BBBB", TENSOR_VERSION, _CODE_FOR[arr.dtype],
                                        arr.ndim, 0) + b"\x00" * 8
    stream.write(header)
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_tensor_stream(stream: BinaryIO) -> np.ndarray:
    header = _read_exact(stream, 16, "header")
    if header[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {header[:4]!r}, expected {TENSOR_MAGIC!r}")
    version, dtype_code, rank, pad = struct.unpack("<BBBB", header[4:8])
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise FormatError(f"bad dtype code {dtype_code}")
    if pad != 0 or header[8:16] != b"\x00" * 8:
        raise FormatError("nonzero padding in header")
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "dims"))
    n_elements = 1
    for dim in dims:
        n_elements *= dim
        if n_elements > _MAX_ELEMENTS:
            raise FormatError(f"dim overflow: {dims} is too large")
    dtype = _DTYPE_CODES[dtype_code]
    payload = _read_exact(stream, n_elements * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor_stream(f, array)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor_stream(f)
        if f.read(1):
            raise FormatError("trailing data after payload")
    return arr


# ---------------------------------------------------------------------------
# checkpoints

def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float tensors plus a JSON metadata block.

    ``meta`` must carry ``config_hash`` as a 64-char hex SHA-256 string; the
    digest is duplicated in the fixed header for cheap compatibility checks.
    """
    digest = bytes.fromhex(meta["config_hash"])
    if len(digest) != 32:
        raise FormatError("config_hash must be a 64-hex-character SHA-256")
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<B", CKPT_VERSION) + b"\x00" * 3 + digest)
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            write_tensor_stream(f, tensors[name])


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        head = _read_exact(f, 40, "checkpoint header")
        if head[:4] != CKPT_MAGIC:
            raise FormatError(f"bad magic {head[:4]!r}, expected {CKPT_MAGIC!r}")
        version = head[4]
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        digest = head[8:40]
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        try:
            meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt metadata block: {exc}") from exc
        if meta.get("config_hash") != digest.hex():
            raise FormatError("config hash mismatch between header and metadata")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            tensors[name] = read_tensor_stream(f)
        if f.read(1):
            raise FormatError("trailing data after tensor table")
    return tensors, meta
