"""Synthetic multi-domain image data with a controllable spurious cue.

Every image is a foreground blob on a colored background. The blob's
shape decides the label (rounded ellipse = 0, crossing bars = 1) and is
drawn with the same gray texture for both classes, so shape is the only
causal feature. The background is filled from a warm or cool palette;
with probability rho ("spurious_correlation") the palette family matches
the label, so background hue is predictive in-domain but not stable
across domains. Domains 0-2 are training data, 3 is the in-distribution
validation domain (unseen palette, same rho), 4 is the out-of-distribution
test domain where the correlation is inverted.

The on-disk format is bit-exact: magic "CGPD", version u32, N u32, then
C, H, W u32, followed per sample by label u8, domain u8 and float32
pixels (little-endian, row-major CHW).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

MAGIC = b"CGPD"
VERSION = 1
HEADER_BYTES = 24  # magic + version + N + C + H + W

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# (cool, warm) background palettes; one pair per domain.
PALETTES = {
    0: ((0.25, 0.45, 0.85), (0.85, 0.40, 0.25)),
    1: ((0.20, 0.55, 0.80), (0.80, 0.50, 0.20)),
    2: ((0.30, 0.40, 0.90), (0.90, 0.35, 0.30)),
    3: ((0.22, 0.50, 0.78), (0.82, 0.45, 0.22)),
    4: ((0.28, 0.48, 0.88), (0.88, 0.38, 0.28)),
}

TRAIN_DOMAINS = (0, 1, 2)
ID_DOMAIN = 3
OOD_DOMAIN = 4


@dataclass
class DomainSpec:
    domain_id: int
    spurious_correlation: float
    sample_count: int
    image_size: int = 32

    def __post_init__(self):
        if not 0.0 <= self.spurious_correlation <= 1.0:
            raise ConfigError(f"spurious correlation must lie in [0, 1], got {self.spurious_correlation}")
        if self.domain_id not in PALETTES:
            raise ConfigError(f"domain_id must be one of {sorted(PALETTES)}, got {self.domain_id}")


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 in {0, 1}
    domains: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.images[mask], self.labels[mask], self.domains[mask])

    def domain(self, d: int) -> "Dataset":
        return self.subset(self.domains == d)

    def domains_in(self, ids) -> "Dataset":
        return self.subset(np.isin(self.domains, list(ids)))


def default_domain_specs(per_domain: int = 500, rho_train: float = 0.9,
                         rho_ood: float = 0.1, image_size: int = 32) -> list[DomainSpec]:
    specs = [DomainSpec(d, rho_train, per_domain, image_size) for d in (*TRAIN_DOMAINS, ID_DOMAIN)]
    specs.append(DomainSpec(OOD_DOMAIN, rho_ood, per_domain, image_size))
    return specs


# foreground/background recipe constants, calibrated so that the shape cue is
# reliably learnable within the default epoch budget while background hue
# stays the quicker (but domain-unstable) cue
FG_GRAY = 0.80
FG_TEXTURE_STD = 0.02
BG_TEXTURE_STD = 0.03
PALETTE_JITTER_STD = 0.22  # per-sample hue wobble; keeps the hue cue imperfect


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    ry = rng.uniform(5.0, 8.0)
    rx = rng.uniform(5.0, 8.0)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _cross_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    half_len = rng.uniform(8.0, 11.0)
    half_thick = rng.uniform(1.6, 2.4)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    bar1 = (np.abs(u) <= half_len) & (np.abs(v) <= half_thick)
    bar2 = (np.abs(v) <= half_len) & (np.abs(u) <= half_thick)
    return bar1 | bar2


def generate_domain(spec: DomainSpec, rng: np.random.Generator):
    """Images, labels, foreground masks and hue/label agreement for one domain.

    The extra arrays (foreground mask, whether the background palette matched
    the label) never reach the dataset file; they exist for statistical checks.
    """
    size = spec.image_size
    n = spec.sample_count
    cool, warm = PALETTES[spec.domain_id]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    fg_masks = np.empty((n, size, size), dtype=bool)
    matched = np.empty(n, dtype=bool)
    for i in range(n):
        label = int(rng.integers(0, 2))
        fg = _cross_mask(size, rng) if label else _ellipse_mask(size, rng)
        hit = bool(rng.random() < spec.spurious_correlation)
        family_warm = (label == 1) == hit
        palette = np.array(warm if family_warm else cool, dtype=np.float32)
        palette = palette + rng.normal(0.0, PALETTE_JITTER_STD, size=3).astype(np.float32)
        img = np.empty((3, size, size), dtype=np.float32)
        img[:] = palette[:, None, None]
        img += rng.normal(0.0, BG_TEXTURE_STD, size=img.shape).astype(np.float32)
        gray = FG_GRAY + rng.uniform(-0.04, 0.04)
        fg_tex = gray + rng.normal(0.0, FG_TEXTURE_STD, size=(size, size)).astype(np.float32)
        for ch in range(3):
            img[ch][fg] = fg_tex[fg]
        np.clip(img, 0.0, 1.0, out=img)
        images[i] = img
        labels[i] = label
        fg_masks[i] = fg
        matched[i] = hit
    return images, labels, fg_masks, matched


def generate(specs: list[DomainSpec], seed: int) -> Dataset:
    """Deterministic dataset over all requested domains."""
    if not specs:
        raise ConfigError("at least one domain spec is required")
    from .rng import stream

    all_images, all_labels, all_domains = [], [], []
    for spec in specs:
        rng = stream(seed, f"data.domain{spec.domain_id}")
        images, labels, _, _ = generate_domain(spec, rng)
        all_images.append(images)
        all_labels.append(labels)
        all_domains.append(np.full(spec.sample_count, spec.domain_id, dtype=np.int64))
    return Dataset(np.concatenate(all_images), np.concatenate(all_labels), np.concatenate(all_domains))


# ---------------------------------------------------------------------------
# preprocessing


def normalize(images: np.ndarray) -> np.ndarray:
    """Per-channel (p - mean) / std with the standard ImageNet statistics."""
    return ((images - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]).astype(images.dtype)


def denormalize(images: np.ndarray) -> np.ndarray:
    return (images * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None]).astype(images.dtype)


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random 90-degree rotation and horizontal flip, independently per image."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        k = int(rng.integers(0, 4))
        rot = np.rot90(img, k, axes=(1, 2))
        if rng.random() < 0.5:
            rot = rot[:, :, ::-1]
        out[i] = rot
    return out


# ---------------------------------------------------------------------------
# file format


def write_dataset(ds: Dataset, path) -> None:
    n = len(ds)
    c, h, w = (ds.images.shape[1:] if n else (3, 32, 32))
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIIII", VERSION, n, c, h, w)
    for i in range(n):
        out += struct.pack("<BB", int(ds.labels[i]), int(ds.domains[i]))
        out += np.ascontiguousarray(ds.images[i], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_dataset(path) -> Dataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read dataset {path}: {e}") from e
    if len(blob) < HEADER_BYTES:
        raise DataFormatError(f"{path}: header needs {HEADER_BYTES} bytes, file has {len(blob)}")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, n, c, h, w = struct.unpack_from("<IIIII", blob, 4)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    record = 2 + 4 * c * h * w
    expected = HEADER_BYTES + n * record
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes for {n} samples, found {len(blob)}")
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    off = HEADER_BYTES
    for i in range(n):
        labels[i] = blob[off]
        domains[i] = blob[off + 1]
        images[i] = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=off + 2).reshape(c, h, w)
        off += record
    return Dataset(images, labels, domains)


def read_ppm(path) -> np.ndarray:
    """8-bit binary PPM ("P6") as a [3, H, W] float image in [0, 1]."""
    from .imageio import read_pnm

    kind, arr = read_pnm(path)
    if kind != "P6":
        raise DataFormatError(f"{path}: expected P6 pixmap, got {kind}")
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# batching


def stratified_batches(ds: Dataset, batch_size: int, rng: np.random.Generator,
                       domain_ids=TRAIN_DOMAINS):
    """Seeded shuffle yielding batches that mix all requested domains.

    Per-domain index pools are shuffled independently, then consumed in
    proportion so every batch contains samples from every domain that still
    has data (invariance penalties need >= 2 environments per batch).
    """
    pools = []
    for d in domain_ids:
        idx = np.flatnonzero(ds.domains == d)
        if len(idx):
            pools.append(rng.permutation(idx))
    if not pools:
        return
    k = len(pools)
    base, extra = divmod(batch_size, k)
    shares = [base + (1 if j < extra else 0) for j in range(k)]
    cursors = [0] * k
    while any(c < len(p) for c, p in zip(cursors, pools)):
        take = []
        for j, pool in enumerate(pools):
            lo = cursors[j]
            hi = min(lo + max(1, shares[j]), len(pool))
            take.append(pool[lo:hi])
            cursors[j] = hi
        batch_idx = np.concatenate(take)
        if len(batch_idx) == 0:
            break
        yield ds.images[batch_idx], ds.labels[batch_idx], ds.domains[batch_idx]
