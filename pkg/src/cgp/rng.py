"""Seeded randomness, split into independent named streams.

All randomness in a run flows from one integer seed. Each consumer draws
from its own named substream so that, e.g., changing the noise schedule
cannot shift the data shuffle. Gaussian samples go through an explicit
Box-Muller transform on top of the uniform stream.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAM_NAMES = ("data", "init", "noise", "shuffle")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for one named substream of `seed`."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


class RunStreams:
    """The four substreams used by a single training/generation run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.data = stream(seed, "data")
        self.init = stream(seed, "init")
        self.noise = stream(seed, "noise")
        self.shuffle = stream(seed, "shuffle")


def normal_box_muller(gen: np.random.Generator, shape, sigma: float = 1.0) -> np.ndarray:
    """I.i.d. N(0, sigma^2) samples via the Box-Muller transform.

    Draws pairs of uniforms u1 in (0, 1], u2 in [0, 1) and maps them to
    sqrt(-2 ln u1) * (cos, sin)(2 pi u2).
    """
    n = int(np.prod(shape)) if shape else 1
    m = (n + 1) // 2
    u1 = 1.0 - gen.random(m)  # open at 0 so log() stays finite
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
    return (sigma * z).reshape(shape)
