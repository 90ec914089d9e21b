"""Tiny vision transformer that produces the soft mask and a confidence score.

The encoder turns an image into patch tokens plus a CLS embedding. A
one-unit head over the patch tokens, squashed by a sigmoid and upsampled
bilinearly, yields a full-resolution soft mask in [0, 1]; a separate
classification head over the CLS embedding yields per-sample softmax
confidence. Every public operation bumps a module-level call counter so
deployment paths can prove they never touch the transformer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from . import tensor as T
from .layers import LayerNorm, Linear, bilinear_upsample, extract_patches, gelu
from .tensor import Tensor

_calls = 0


def vit_call_count() -> int:
    return _calls


def reset_vit_call_count() -> None:
    global _calls
    _calls = 0


def _count_call() -> None:
    global _calls
    _calls += 1


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    num_classes: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


class EncoderBlock:
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype, name: str):
        self.heads = heads
        self.head_dim = dim // heads
        self.ln1 = LayerNorm(dim, dtype=dtype, name=f"{name}.ln1")
        self.ln2 = LayerNorm(dim, dtype=dtype, name=f"{name}.ln2")
        self.q = Linear(dim, dim, rng, dtype, name=f"{name}.q")
        self.k = Linear(dim, dim, rng, dtype, name=f"{name}.k")
        self.v = Linear(dim, dim, rng, dtype, name=f"{name}.v")
        self.proj = Linear(dim, dim, rng, dtype, name=f"{name}.proj")
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, dtype, name=f"{name}.fc1")
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, dtype, name=f"{name}.fc2")

    def _split_heads(self, x: Tensor, n: int, s: int) -> Tensor:
        return T.transpose(T.reshape(x, (n, s, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attention(self, x: Tensor) -> Tensor:
        n, s, d = x.shape
        q = self._split_heads(self.q(x), n, s)
        k = self._split_heads(self.k(x), n, s)
        v = self._split_heads(self.v(x), n, s)
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim)), axis=-1)
        ctx = T.matmul(att, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, s, d))
        return self.proj(merged)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attention(self.ln1(x)))
        x = T.add(x, self.fc2(gelu(self.fc1(self.ln2(x)))))
        return x

    def params(self):
        out = []
        for part in (self.ln1, self.q, self.k, self.v, self.proj, self.ln2, self.fc1, self.fc2):
            out.extend(part.params())
        return out


class MaskViT:
    """Encoder + soft-mask head + confidence head."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.embed_dim
        in_dim = 3 * cfg.patch_size * cfg.patch_size
        self.patch_embed = Linear(in_dim, d, rng, dtype, name="vit.embed")
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(cfg.num_patches, d)), requires_grad=True, dtype=dtype)
        self.cls_token = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True, dtype=dtype)
        self.blocks = [EncoderBlock(d, cfg.heads, cfg.mlp_ratio, rng, dtype, name=f"vit.block{i}")
                       for i in range(cfg.depth)]
        self.mask_head = Linear(d, 1, rng, dtype, name="vit.mask_head")
        self.cls_head = Linear(d, cfg.num_classes, rng, dtype, name="vit.cls_head")
        # architecture facts a checkpoint cannot recover from shapes alone
        self.meta = Tensor(np.array([cfg.heads, cfg.mlp_ratio], dtype=np.float32))

    def patchify(self, images: Tensor) -> Tensor:
        """Patch tokens with positional embedding and a prepended CLS token."""
        n = images.shape[0]
        if images.shape[2] != self.cfg.image_size or images.shape[3] != self.cfg.image_size:
            raise ConfigError(f"expected {self.cfg.image_size}x{self.cfg.image_size} images, got {images.shape}")
        tok = self.patch_embed(extract_patches(images, self.cfg.patch_size))
        tok = T.add(tok, T.tile_axis0(self.pos, n))
        cls = T.tile_axis0(self.cls_token, n)
        return T.concat([cls, tok], axis=1)

    def encode(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Run the encoder; returns (cls_embedding [N, D], patch tokens [N, P, D])."""
        _count_call()
        x = self.patchify(images)
        for block in self.blocks:
            x = block(x)
        cls = T.reshape(T.narrow(x, 1, 0, 1), (x.shape[0], self.cfg.embed_dim))
        tokens = T.narrow(x, 1, 1, self.cfg.num_patches)
        return cls, tokens

    def mask_scores(self, tokens: Tensor) -> Tensor:
        """Per-patch sigmoid relevance scores in (0, 1), shape [N, P]."""
        _count_call()
        n, p, _ = tokens.shape
        return T.sigmoid(T.reshape(self.mask_head(tokens), (n, p)))

    def soft_mask(self, scores: Tensor, out_h: int | None = None, out_w: int | None = None) -> Tensor:
        """Upsample patch scores onto the image plane: [N, 1, H, W] in [0, 1]."""
        _count_call()
        n = scores.shape[0]
        g = self.cfg.grid
        out_h = out_h or self.cfg.image_size
        out_w = out_w or self.cfg.image_size
        grid = T.reshape(scores, (n, g, g))
        up = bilinear_upsample(grid, out_h, out_w)
        return T.reshape(up, (n, 1, out_h, out_w))

    def mask_for(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Convenience: encode + score + upsample. Returns (mask, cls, tokens)."""
        cls, tokens = self.encode(images)
        mask = self.soft_mask(self.mask_scores(tokens))
        return mask, cls, tokens

    def confidence(self, cls_embed: Tensor) -> tuple[Tensor, Tensor]:
        """Head logits and max-softmax confidence per sample ([N, K], [N])."""
        _count_call()
        logits = self.cls_head(cls_embed)
        probs = T.softmax(logits, axis=1)
        return logits, T.max_axis(probs, axis=1)

    def params(self):
        out = self.patch_embed.params()
        out.append(("vit.pos", self.pos))
        out.append(("vit.cls_token", self.cls_token))
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.mask_head.params())
        out.extend(self.cls_head.params())
        out.append(("vit.meta", self.meta))
        return out
