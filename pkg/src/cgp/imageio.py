"""Dependency-free binary PGM ("P5") and PPM ("P6") reading and writing.

Values are 8-bit; floats in [0, 1] quantize as round-half-up to 255ths,
so 0.5 maps to 128 exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataFormatError


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a [H, W] float image in [0, 1] as binary PGM."""
    if gray.ndim != 2:
        raise DataFormatError(f"PGM wants a 2-d image, got shape {gray.shape}")
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + _quantize(gray).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a [H, W, 3] float image in [0, 1] as binary PPM."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataFormatError(f"PPM wants an H x W x 3 image, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + _quantize(rgb).tobytes())


def read_pnm(path):
    """Read binary PGM/PPM; returns (kind, uint8 array [H, W] or [H, W, 3])."""
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    kind = fields[0].decode("ascii")
    if kind not in ("P5", "P6"):
        raise DataFormatError(f"{path}: unsupported format {kind!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit images supported, maxval {maxval}")
    channels = 1 if kind == "P5" else 3
    need = w * h * channels
    raw = blob[pos:pos + need]
    if len(raw) != need:
        raise DataFormatError(f"{path}: expected {need} pixel bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return kind, (arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3))
