"""The deployed classifier: a small CNN feature extractor plus a GAP head.

This is the only model that runs at inference time; it never calls into
the transformer (the `vit` call counter stays untouched on any predict or
evaluate path).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .layers import Conv2d, Linear, avg_pool2d, global_avg_pool
from .tensor import Tensor, relu


@dataclass
class CnnConfig:
    channels: tuple[int, ...] = (16, 32)
    kernel: int = 3
    pool: int = 2
    num_classes: int = 2
    image_size: int = 32

    def __post_init__(self):
        if not self.channels:
            raise ConfigError("at least one conv block is required")
        side = self.image_size
        for _ in self.channels:
            side //= self.pool
        if side < 1:
            raise ConfigError(f"{len(self.channels)} pooled blocks collapse a "
                              f"{self.image_size}px image below 1x1")
        self.feature_side = side


class SmallCnn:
    """conv -> relu -> avgpool blocks, then global average pool -> linear."""

    def __init__(self, cfg: CnnConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.convs = []
        in_ch = 3
        pad = (cfg.kernel - 1) // 2
        for i, out_ch in enumerate(cfg.channels):
            self.convs.append(Conv2d(in_ch, out_ch, cfg.kernel, rng, stride=1, padding=pad,
                                     dtype=dtype, name=f"cnn.conv{i}"))
            in_ch = out_ch
        self.head_linear = Linear(in_ch, cfg.num_classes, rng, dtype, name="cnn.head")

    def features(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = avg_pool2d(relu(conv(x)), self.cfg.pool)
        return x

    def head(self, feats: Tensor) -> Tensor:
        return self.head_linear(global_avg_pool(feats))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Argmax class per image; ties resolve to the lowest class index."""
        preds = []
        for lo in range(0, len(images), batch_size):
            logits = self.forward(Tensor(images[lo:lo + batch_size])).data
            preds.append(np.argmax(logits, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def params(self):
        out = []
        for conv in self.convs:
            out.extend(conv.params())
        out.extend(self.head_linear.params())
        return out
