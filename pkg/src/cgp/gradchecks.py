"""Named finite-difference suites verifying every backward rule in 64-bit mode.

Each check builds a small double-precision model, compares reverse-mode
gradients against central differences, and reports the worst relative
error. The pipeline scope drives the complete training loss (encoder,
mask head, confidence gate, CNN, per-sample weighting) through every
parameter coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, tensor as T
from .cnn import CnnConfig, SmallCnn
from .layers import Conv2d, LayerNorm, Linear, cross_entropy
from .tensor import Tensor, grad_check
from .train import CgpHyper, CgpModels, adaptive_weight_t, cgp_losses
from .vit import MaskViT, ViTConfig

TOLERANCE = 1e-5
_F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tolerance


def _rng():
    return np.random.default_rng(12345)


def check_linear() -> float:
    rng = _rng()
    layer = Linear(5, 3, rng, dtype=_F64)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True, dtype=_F64)
    tensors = [x, layer.weight, layer.bias]
    return grad_check(lambda: T.tsum(T.mul(layer(x), layer(x))), tensors)


def check_conv2d() -> float:
    rng = _rng()
    conv = Conv2d(2, 3, 3, rng, padding=1, dtype=_F64)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True, dtype=_F64)
    tensors = [x, conv.kernel, conv.bias]
    return grad_check(lambda: T.tsum(T.mul(conv(x), conv(x))), tensors)


def check_layer_norm() -> float:
    rng = _rng()
    ln = LayerNorm(6, dtype=_F64)
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True, dtype=_F64)
    # project through fixed random weights; sum(LN(x)^2) alone is almost
    # invariant in x and its vanishing gradient drowns in FD noise
    r = Tensor(rng.normal(size=(3, 6)), dtype=_F64)

    def f():
        y = ln(x)
        return T.add(T.tsum(T.mul(y, r)), T.tsum(T.mul(T.mul(y, y), r)))

    return grad_check(f, [x, ln.gamma, ln.beta])


def check_pooling() -> float:
    rng = _rng()
    x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True, dtype=_F64)

    def f():
        pooled = layers.avg_pool2d(x, 2)
        gap = layers.global_avg_pool(pooled)
        return T.tsum(T.mul(gap, gap))

    return grad_check(f, [x])


def check_cross_entropy() -> float:
    rng = _rng()
    z = Tensor(rng.normal(size=(5, 3)), requires_grad=True, dtype=_F64)
    y = rng.integers(0, 3, size=5)
    return grad_check(lambda: cross_entropy(z, y), [z])


def check_softmax_gelu() -> float:
    rng = _rng()
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=_F64)

    def f():
        s = T.softmax(layers.gelu(x), axis=1)
        return T.tsum(T.mul(s, s))

    return grad_check(f, [x])


def check_bilinear() -> float:
    rng = _rng()
    x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True, dtype=_F64)

    def f():
        up = layers.bilinear_upsample(x, 7, 7)
        return T.tsum(T.mul(up, up))

    return grad_check(f, [x])


def _randomize(params, rng, scale: float = 0.4) -> None:
    # training-time init is tiny (0.02); checks want O(1) parameters so no
    # gradient coordinate sits below the finite-difference noise floor
    for _, t in params:
        if t.requires_grad:
            t.data = rng.normal(0.0, scale, size=t.data.shape)


def _checkable(params):
    # key biases shift every attention logit of a query by the same amount,
    # so their gradient is identically zero; relative FD cannot rate them
    # (see check_key_bias_null, which pins the invariance instead)
    return [t for name, t in params if t.requires_grad and not name.endswith(".k.bias")]


def check_attention_block() -> float:
    rng = _rng()
    vit = MaskViT(ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                            mlp_ratio=2), rng, dtype=_F64)
    block = vit.blocks[0]
    _randomize(block.params(), rng)
    x = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True, dtype=_F64)
    r = Tensor(rng.normal(size=(2, 5, 8)), dtype=_F64)
    tensors = [x] + _checkable(block.params())

    def f():
        y = block(x)
        return T.add(T.tsum(T.mul(y, r)), T.tsum(T.mul(T.mul(y, y), r)))

    return grad_check(f, tensors, sample=40, rng=_rng())


def check_key_bias_null() -> float:
    """The attention key bias must receive an (analytically) zero gradient."""
    rng = _rng()
    vit = MaskViT(ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                            mlp_ratio=2), rng, dtype=_F64)
    block = vit.blocks[0]
    _randomize(block.params(), rng)
    x = Tensor(rng.normal(size=(2, 5, 8)), dtype=_F64)
    for _, t in block.params():
        t.grad = None
    y = block(x)
    T.backward(T.tsum(T.mul(y, y)))
    return float(np.abs(block.k.bias.grad).max())


def check_mask_path() -> float:
    rng = _rng()
    vit = MaskViT(ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2,
                            mlp_ratio=2), rng, dtype=_F64)
    _randomize(vit.params(), rng)
    x = Tensor(rng.normal(size=(2, 3, 8, 8)), dtype=_F64)
    r = Tensor(rng.normal(size=(2, 1, 8, 8)), dtype=_F64)
    tensors = _checkable(vit.params())

    def f():
        mask, _, _ = vit.mask_for(x)
        return T.tsum(T.mul(mask, r))

    return grad_check(f, tensors, sample=30, rng=_rng())


def check_confidence_gate() -> float:
    rng = _rng()
    c = Tensor(rng.uniform(0.05, 0.95, size=6), requires_grad=True, dtype=_F64)
    return grad_check(lambda: T.tsum(adaptive_weight_t(c, 0.75, 8.0)), [c])


def tiny_pipeline(seed: int = 12345, randomize: bool = True):
    """Double-precision two-sample pipeline small enough to difference every
    single parameter coordinate."""
    rng = np.random.default_rng(seed)
    vit = MaskViT(ViTConfig(image_size=16, patch_size=4, embed_dim=16, depth=1, heads=2,
                            mlp_ratio=2), rng, dtype=_F64)
    cnn = SmallCnn(CnnConfig(channels=(4, 8), image_size=16), rng, dtype=_F64)
    models = CgpModels(cnn=cnn, vit=vit)
    if randomize:
        # check at a generic parameter point, not the near-zero init
        _randomize(models.trainable_params(), rng, scale=0.3)
    x = Tensor(rng.normal(0.0, 1.0, size=(2, 3, 16, 16)), dtype=_F64)
    labels = np.array([0, 1])
    noise = rng.normal(0.0, 0.5, size=(2, 3, 16, 16))
    hyper = CgpHyper(sigma_noise=0.5, tau=0.75, steepness=8.0, lambda_vit=0.1, seed=seed)
    return models, x, labels, noise, hyper


def check_full_pipeline(sample: int | None = None) -> float:
    models, x, labels, noise, hyper = tiny_pipeline()
    tensors = _checkable(models.trainable_params())

    def f():
        total, _ = cgp_losses(models, x, labels, hyper, None, noise=noise)
        return total

    # eps balances rounding noise (~|f|*ulp/eps) against truncation (~eps^2)
    # for the smallest-magnitude gradient coordinates of this loss
    return grad_check(f, tensors, eps=3e-5, sample=sample, rng=_rng())


SCOPES = {
    "layers": [
        ("linear", check_linear),
        ("conv2d", check_conv2d),
        ("layer_norm", check_layer_norm),
        ("pooling", check_pooling),
        ("cross_entropy", check_cross_entropy),
        ("softmax_gelu", check_softmax_gelu),
        ("bilinear_upsample", check_bilinear),
    ],
    "vit": [
        ("attention_block", check_attention_block),
        ("attention_key_bias_null", check_key_bias_null),
        ("mask_path", check_mask_path),
    ],
    "eq3": [
        ("confidence_gate", check_confidence_gate),
    ],
    "eq4": [
        ("full_pipeline", check_full_pipeline),
    ],
}


def run_checks(scope: str = "all", tolerance: float = TOLERANCE) -> list[CheckResult]:
    if scope == "all":
        names = ["layers", "vit", "eq3", "eq4"]
    elif scope in SCOPES:
        names = [scope]
    else:
        raise ValueError(f"unknown scope {scope!r}; choose from all, {', '.join(SCOPES)}")
    results = []
    for group in names:
        for name, fn in SCOPES[group]:
            results.append(CheckResult(name=name, max_err=float(fn()), tolerance=tolerance))
    return results
