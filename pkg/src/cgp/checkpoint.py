"""Flat binary parameter checkpoints.

Layout: magic "CGPW", version u32, count u32, then one record per
parameter: name length u16, UTF-8 name, rank u8, dims u32[rank], float32
values. All integers and floats little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"CGPW"
VERSION = 1


def save_params(params: list[tuple[str, Tensor]], path) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(params))
    for name, t in params:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        out += struct.pack("<H", len(raw))
        out += raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    result: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            result[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt at byte {off}: {e}") from e
    return result


def restore_params(params: list[tuple[str, Tensor]], stored: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into model tensors; names and shapes must match."""
    names = [n for n, _ in params]
    missing = [n for n in names if n not in stored]
    extra = [n for n in stored if n not in names]
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing {missing}, unexpected {extra}")
    for name, t in params:
        arr = stored[name]
        if tuple(arr.shape) != tuple(t.data.shape):
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {t.data.shape}")
        t.data = arr.astype(t.data.dtype)
