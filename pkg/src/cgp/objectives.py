"""Invariance training objectives: ERM, IRM, V-REx, IRMX, GroupDRO.

Each objective consumes clean-input logits grouped by training domain and
returns a scalar loss tensor. The IRM penalty uses the closed form of the
risk's derivative with respect to a unit logit multiplier, so it stays
first-order differentiable in the model parameters; GroupDRO keeps
exponentiated-gradient weights on the probability simplex across steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from . import tensor as T
from .layers import cross_entropy
from .tensor import Tensor

OBJECTIVES = ("erm", "irm", "vrex", "irmx", "groupdro")


def erm_risk(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Plain mean cross-entropy over the batch."""
    return cross_entropy(logits, labels)


def _risk_scale_grad(logits: Tensor, labels: np.ndarray) -> Tensor:
    # d/dw of mean CE(w * logits) at w = 1, in closed form:
    # mean_i( <softmax(z_i), z_i> - z_{i, y_i} )
    probs = T.softmax(logits, axis=1)
    weighted = T.tsum(T.mul(probs, logits), axis=1)
    picked = T.gather_labels(logits, labels)
    return T.tmean(T.sub(weighted, picked))


def irm_penalty(env_logits: list[Tensor], env_labels: list[np.ndarray]) -> Tensor:
    """Sum over environments of the squared risk gradient w.r.t. a unit
    scalar multiplier on the logits."""
    if not env_logits:
        raise ContractError("irm_penalty needs at least one environment")
    total = None
    for logits, labels in zip(env_logits, env_labels):
        g = _risk_scale_grad(logits, labels)
        sq = T.mul(g, g)
        total = sq if total is None else T.add(total, sq)
    return total


def vrex_penalty(env_risks: list[Tensor]) -> Tensor:
    """Population variance of the per-environment risks."""
    if len(env_risks) < 2:
        raise ContractError(f"vrex_penalty needs >= 2 environments, got {len(env_risks)}")
    stacked = T.concat([T.reshape(r, (1,)) for r in env_risks], axis=0)
    mean_sq = T.tmean(T.mul(stacked, stacked))
    mean = T.tmean(stacked)
    return T.sub(mean_sq, T.mul(mean, mean))


def irmx_penalty(env_logits: list[Tensor], env_labels: list[np.ndarray],
                 env_risks: list[Tensor], alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """Weighted combination alpha * IRM penalty + beta * variance penalty."""
    return T.add(T.scale(irm_penalty(env_logits, env_labels), alpha),
                 T.scale(vrex_penalty(env_risks), beta))


@dataclass
class GroupWeights:
    q: np.ndarray
    eta: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if np.any(self.q < 0) or abs(self.q.sum() - 1.0) > 1e-9:
            raise ContractError(f"group weights must lie on the simplex, got {self.q}")


def groupdro_step(env_risks: list[Tensor], weights: GroupWeights) -> tuple[Tensor, GroupWeights]:
    """Exponentiated-gradient reweighting: q_e <- q_e * exp(eta * R_e),
    renormalized; returns (sum_e q_e * R_e, updated weights)."""
    if len(env_risks) != len(weights.q):
        raise ContractError(f"{len(env_risks)} risks vs {len(weights.q)} weights")
    risks = np.array([r.item() for r in env_risks])
    q = weights.q * np.exp(weights.eta * risks)
    q = q / q.sum()
    loss = None
    for qe, r in zip(q, env_risks):
        term = T.scale(r, float(qe))
        loss = term if loss is None else T.add(loss, term)
    return loss, GroupWeights(q, weights.eta)


@dataclass
class ObjectiveState:
    """Per-run objective bookkeeping (annealing epoch, GroupDRO weights)."""

    kind: str
    irm_weight: float = 100.0
    irm_anneal_epochs: int = 5
    vrex_weight: float = 10.0
    groupdro_eta: float = 0.01
    epoch: int = 0
    group_weights: GroupWeights | None = field(default=None)

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.kind!r}; choose from {OBJECTIVES}")

    def _split(self, logits: Tensor, labels: np.ndarray, domains: np.ndarray):
        env_logits, env_labels = [], []
        for d in np.unique(domains):
            idx = np.flatnonzero(domains == d)
            env_logits.append(T.take_rows(logits, idx))
            env_labels.append(labels[idx])
        return env_logits, env_labels

    def loss(self, logits: Tensor, labels: np.ndarray, domains: np.ndarray) -> Tensor:
        """Scalar training loss on clean inputs for the selected objective."""
        if self.kind == "erm":
            return erm_risk(logits, labels)
        env_logits, env_labels = self._split(logits, labels, domains)
        risks = [cross_entropy(zl, yl) for zl, yl in zip(env_logits, env_labels)]
        mean_risk = T.tmean(T.concat([T.reshape(r, (1,)) for r in risks], axis=0))
        irm_w = self.irm_weight if self.epoch >= self.irm_anneal_epochs else 0.0
        if self.kind == "irm":
            return T.add(mean_risk, T.scale(irm_penalty(env_logits, env_labels), irm_w))
        if self.kind == "vrex":
            if len(risks) < 2:
                raise ContractError("vrex objective needs >= 2 domains in every batch")
            return T.add(mean_risk, T.scale(vrex_penalty(risks), self.vrex_weight))
        if self.kind == "irmx":
            if len(risks) < 2:
                raise ContractError("irmx objective needs >= 2 domains in every batch")
            return T.add(mean_risk, irmx_penalty(env_logits, env_labels, risks,
                                                 alpha=irm_w, beta=self.vrex_weight))
        # groupdro
        if self.group_weights is None or len(self.group_weights.q) != len(risks):
            self.group_weights = GroupWeights(np.full(len(risks), 1.0 / len(risks)), self.groupdro_eta)
        loss, self.group_weights = groupdro_step(risks, self.group_weights)
        return loss
