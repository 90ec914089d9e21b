"""Mask-guided perturbation training and the two-stage workflow.

One CGP step: encode the clean batch with the transformer, build the soft
mask, blend mask-weighted Gaussian noise into the image, and optimize

    total = objective(clean logits)
          + lambda_vit * (CE on mask-multiplied inputs + CE of the ViT head)
          + mean_i( lambda_adv(x_i) * CE_i on perturbed inputs )

where lambda_adv gates each sample's adversarial term by the transformer's
softmax confidence on the clean input. Noise enters as a constant, so
gradients reach the mask head only through the blend weights. Stage 2
drops the transformer entirely and fine-tunes the CNN on clean inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cnn import SmallCnn
from .errors import ConfigError, ContractError, ShapeError
from .layers import cross_entropy
from .objectives import ObjectiveState
from .rng import normal_box_muller
from . import tensor as T
from .tensor import Tensor
from .vit import MaskViT


@dataclass
class CgpHyper:
    sigma_noise: float = 0.5
    tau: float = 0.75
    steepness: float = 8.0
    lambda_vit: float = 0.1
    stage1_epochs: int = 20
    stage2_epochs: int = 5
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ConfigError(f"sigma_noise must be >= 0, got {self.sigma_noise}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.steepness <= 0:
            raise ConfigError(f"steepness must be > 0, got {self.steepness}")
        if self.lambda_vit < 0:
            raise ConfigError(f"lambda_vit must be >= 0, got {self.lambda_vit}")
        if self.batch_size < 1 or self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epoch counts >= 0")


@dataclass
class LossBreakdown:
    """Scalar loss components of one step, plus the per-sample adversarial
    parts needed to reconstruct the total exactly."""

    l_orig: float
    l_vit: float
    l_adv: float
    lambda_adv_mean: float
    l_total: float
    per_sample_lambda: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_sample_adv_ce: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def reconstruct_total(self, lambda_vit: float) -> float:
        adv = float(np.mean(self.per_sample_lambda * self.per_sample_adv_ce)) \
            if len(self.per_sample_lambda) else 0.0
        return self.l_orig + lambda_vit * self.l_vit + adv


def perturb(x: Tensor, mask: Tensor, sigma: float, rng: np.random.Generator,
            noise: np.ndarray | None = None) -> Tensor:
    """Blend per-pixel Gaussian noise into the image where the mask is low:
    x_adv = x * M + (1 - M) * eps, eps ~ N(0, sigma^2) per element.

    Gradients flow through the mask only; x and the noise are constants.
    `noise` substitutes a fixed sample (gradient checks need a frozen loss).
    """
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    n, c, h, w = x.shape
    if mask.shape != (n, 1, h, w):
        raise ShapeError(f"mask shape {mask.shape} does not match images {x.shape}")
    if noise is None:
        noise = normal_box_muller(rng, (n, c, h, w), sigma).astype(x.data.dtype)
    m = T.expand_axis1(mask, c)
    return T.add(T.mul(x, m), T.mul(T.sub(1.0, m), Tensor(noise)))


def adaptive_weight(c: float, tau: float, k: float) -> float:
    """Confidence-gated adversarial weight:
    tau + (1 - tau) * (logistic(k * (c - tau)) - 0.5) * 2."""
    z = k * (float(c) - tau)
    logistic = 1.0 / (1.0 + np.exp(-z)) if z >= 0 else np.exp(z) / (1.0 + np.exp(z))
    return float(tau + (1.0 - tau) * (logistic - 0.5) * 2.0)


def adaptive_weight_t(c: Tensor, tau: float, k: float) -> Tensor:
    """Graph version of `adaptive_weight` over a confidence vector."""
    gate = T.sigmoid(T.scale(T.add(c, -tau), k))
    return T.add(T.scale(T.add(gate, -0.5), 2.0 * (1.0 - tau)), tau)


def total_loss(l_orig: Tensor, l_vit: Tensor, adv_ce: Tensor, lam: Tensor,
               lambda_vit: float) -> tuple[Tensor, LossBreakdown]:
    """Combine the three buckets; the adversarial cross-entropies are
    weighted per sample before batch averaging."""
    for name, t in (("l_orig", l_orig), ("l_vit", l_vit)):
        if float(t.data.reshape(())) < 0:
            raise ContractError(f"{name} must be >= 0, got {float(t.data.reshape(()))}")
    if np.any(adv_ce.data < 0):
        raise ContractError("adversarial cross-entropies must be >= 0")
    weighted = T.tmean(T.mul(lam, adv_ce))
    total = T.add(T.add(l_orig, T.scale(l_vit, lambda_vit)), weighted)
    breakdown = LossBreakdown(
        l_orig=float(l_orig.data.reshape(())),
        l_vit=float(l_vit.data.reshape(())),
        l_adv=float(adv_ce.data.mean()),
        lambda_adv_mean=float(lam.data.mean()),
        l_total=float(total.data.reshape(())),
        per_sample_lambda=lam.data.copy(),
        per_sample_adv_ce=adv_ce.data.copy(),
    )
    return total, breakdown


class SgdMomentum:
    """Classic momentum SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float, momentum: float):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(t.data) for _, t in params]

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        for (_, t), v in zip(self.params, self.velocity):
            if t.grad is None:
                continue
            v *= self.momentum
            v += t.grad
            t.data = t.data - self.lr * v


@dataclass
class CgpModels:
    cnn: SmallCnn
    vit: MaskViT | None = None

    def trainable_params(self, include_vit: bool = True):
        out = list(self.cnn.params())
        if include_vit and self.vit is not None:
            out.extend(self.vit.params())
        return out


def cgp_losses(models: CgpModels, x: Tensor, labels: np.ndarray, hyper: CgpHyper,
               noise_rng: np.random.Generator, objective: ObjectiveState | None = None,
               domains: np.ndarray | None = None,
               noise: np.ndarray | None = None) -> tuple[Tensor, LossBreakdown]:
    """Build the full training loss graph for one batch.

    `noise` overrides the sampled perturbation (the gradient checker needs a
    frozen loss surface).
    """
    vit = models.vit
    if vit is None:
        raise ContractError("cgp_losses needs a transformer model")
    cls_embed, tokens = vit.encode(x)
    mask = vit.soft_mask(vit.mask_scores(tokens))

    x_adv = perturb(x, mask, hyper.sigma_noise, noise_rng, noise=noise)
    x_masked = T.mul(T.expand_axis1(mask, x.shape[1]), x)

    # one batched pass over [clean; masked; perturbed] keeps the GEMMs large
    n = x.shape[0]
    logits_all = models.cnn.forward(T.concat([x, x_masked, x_adv], axis=0))
    logits_clean = T.narrow(logits_all, 0, 0, n)
    logits_masked = T.narrow(logits_all, 0, n, n)
    logits_adv = T.narrow(logits_all, 0, 2 * n, n)
    vit_logits, confidence = vit.confidence(cls_embed)

    if objective is None:
        l_orig = cross_entropy(logits_clean, labels)
    else:
        if objective.kind != "erm" and domains is None:
            raise ContractError(f"objective {objective.kind!r} needs domain identifiers")
        l_orig = objective.loss(logits_clean, labels, domains)

    l_vit = T.add(cross_entropy(logits_masked, labels), cross_entropy(vit_logits, labels))
    adv_ce = cross_entropy(logits_adv, labels, reduction="none")
    lam = adaptive_weight_t(confidence, hyper.tau, hyper.steepness)
    return total_loss(l_orig, l_vit, adv_ce, lam, hyper.lambda_vit)


def train_step(models: CgpModels, optimizer: SgdMomentum, images: np.ndarray,
               labels: np.ndarray, domains: np.ndarray, hyper: CgpHyper,
               noise_rng: np.random.Generator,
               objective: ObjectiveState | None = None) -> LossBreakdown:
    """One optimizer update on the full CGP loss."""
    x = Tensor(images)
    total, breakdown = cgp_losses(models, x, labels, hyper, noise_rng, objective, domains)
    if not np.isfinite(breakdown.l_total):
        raise ContractError(f"non-finite training loss, aborting: {breakdown}")
    optimizer.zero_grad()
    T.backward(total)
    optimizer.step()
    return breakdown


def plain_step(models: CgpModels, optimizer: SgdMomentum, images: np.ndarray,
               labels: np.ndarray, domains: np.ndarray,
               objective: ObjectiveState) -> LossBreakdown:
    """One objective-only update on clean inputs (no transformer, no noise)."""
    logits = models.cnn.forward(Tensor(images))
    loss = objective.loss(logits, labels, domains)
    value = float(loss.data.reshape(()))
    if not np.isfinite(value):
        raise ContractError(f"non-finite training loss, aborting: {value}")
    optimizer.zero_grad()
    T.backward(loss)
    optimizer.step()
    return LossBreakdown(l_orig=value, l_vit=0.0, l_adv=0.0, lambda_adv_mean=0.0, l_total=value)


# ---------------------------------------------------------------------------
# epoch loops


@dataclass
class EpochStats:
    epoch: int
    l_orig: float
    l_vit: float
    l_adv: float
    lambda_adv_mean: float
    l_total: float
    id_val_acc: float

    FIELDS = ("epoch", "l_orig", "l_vit", "l_adv", "lambda_adv_mean", "l_total", "id_val_acc")

    def row(self) -> list:
        return [self.epoch, self.l_orig, self.l_vit, self.l_adv,
                self.lambda_adv_mean, self.l_total, self.id_val_acc]


def _id_accuracy(models: CgpModels, dataset) -> float:
    from .data import ID_DOMAIN, normalize

    id_ds = dataset.domain(ID_DOMAIN)
    if len(id_ds) == 0:
        return float("nan")
    preds = models.cnn.predict(normalize(id_ds.images))
    return float(np.mean(preds == id_ds.labels))


def _run_epochs(models: CgpModels, dataset, hyper: CgpHyper, objective: ObjectiveState,
                streams, epochs: int, use_cgp: bool, vit_in_optimizer: bool) -> list[EpochStats]:
    from .data import TRAIN_DOMAINS, augment, normalize, stratified_batches

    train_ds = dataset.domains_in(TRAIN_DOMAINS)
    if len(train_ds) == 0:
        raise ConfigError("dataset contains no training-domain samples")
    params = models.trainable_params(include_vit=vit_in_optimizer)
    optimizer = SgdMomentum(params, hyper.learning_rate, hyper.momentum)
    trace: list[EpochStats] = []
    for epoch in range(epochs):
        objective.epoch = epoch
        sums = np.zeros(5)
        steps = 0
        for images, labels, domains in stratified_batches(train_ds, hyper.batch_size, streams.shuffle):
            images = augment(images, streams.shuffle)
            x = normalize(images)
            if use_cgp:
                bd = train_step(models, optimizer, x, labels, domains, hyper,
                                streams.noise, objective)
            else:
                bd = plain_step(models, optimizer, x, labels, domains, objective)
            sums += (bd.l_orig, bd.l_vit, bd.l_adv, bd.lambda_adv_mean, bd.l_total)
            steps += 1
        means = sums / max(steps, 1)
        trace.append(EpochStats(epoch, *(float(v) for v in means), _id_accuracy(models, dataset)))
    return trace


def train_stage1(models: CgpModels, dataset, hyper: CgpHyper, objective: ObjectiveState,
                 streams, use_cgp: bool = True) -> list[EpochStats]:
    """Stage 1: the selected objective, with the CGP augmentation terms when
    `use_cgp` is set. Returns the per-epoch trace."""
    return _run_epochs(models, dataset, hyper, objective, streams,
                       hyper.stage1_epochs, use_cgp, vit_in_optimizer=use_cgp)


def fine_tune_stage2(models: CgpModels, dataset, hyper: CgpHyper, streams) -> list[EpochStats]:
    """Stage 2: plain cross-entropy on clean inputs, updating only the CNN.

    The transformer is left untouched; the `vit` call counter must not move.
    """
    from .vit import vit_call_count

    before = vit_call_count()
    trace = _run_epochs(models, dataset, hyper, ObjectiveState("erm"), streams,
                        hyper.stage2_epochs, use_cgp=False, vit_in_optimizer=False)
    after = vit_call_count()
    if after != before:
        raise ContractError(f"stage-2 fine-tune touched the transformer ({after - before} calls)")
    return trace
