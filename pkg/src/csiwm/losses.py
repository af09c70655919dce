"""Rollout losses: teacher forcing, terminal rollout, variance/covariance regularizers, inverse dynamics.

Latent tensors are laid out ``(time, batch, dim)``.  Every function accepts
arrays or graph nodes and returns a scalar node.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .model import idm_predict
from .numerics import Node
from .numerics import ad

LOSS_NAMES = ("tf", "roll", "var", "cov", "idm")


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tf: float = Field(1.0, ge=0)
    roll: float = Field(2.0, ge=0)
    var: float = Field(2.0, ge=0)
    cov: float = Field(10.0, ge=0)
    idm: float = Field(1.0, ge=0)
    gamma: float = Field(1.0, gt=0)
    eps: float = Field(1e-4, gt=0)
    # "online": regularize z0 and predictions (carries gradient); "target": EMA outputs (no gradient).
    regularize_on: Literal["online", "target"] = "online"

    def weight(self, name: str) -> float:
        return float(getattr(self, name))


@dataclass
class RolloutBatch:
    pred: Node                   # (H, K, D) predicted latents
    target: np.ndarray           # (H, K, D) EMA-target latents for steps 1..H
    actions: np.ndarray          # (H, K, 2)
    z0: Node                     # (K, D) online latent of the first frame
    target0: np.ndarray | None = None  # (K, D) EMA-target latent of the first frame

    def __post_init__(self):
        H, K, D = self.pred.shape
        if self.target.shape != (H, K, D) or self.z0.shape != (K, D) or self.actions.shape[:2] != (H, K):
            raise ValueError("inconsistent rollout batch shapes")
        if H < 1 or K < 1:
            raise ValueError("H and K must be >= 1")


@dataclass
class LossBreakdown:
    tf: float
    roll: float
    var: float
    cov: float
    idm: float
    total: float
    graph: Node | None = None

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in LOSS_NAMES + ("total",)}


def _check_same(a: Node, b: Node):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError(f"expected (H, K, D) tensors, got {a.shape}")


def loss_tf(pred, target) -> Node:
    pred, target = ad.const(pred), ad.const(target)
    _check_same(pred, target)
    H, K, _ = pred.shape
    return ad.mul(ad.sum(ad.absolute(ad.sub(pred, target))), 1.0 / (H * K))


def loss_roll(pred, target) -> Node:
    pred, target = ad.const(pred), ad.const(target)
    _check_same(pred, target)
    K = pred.shape[1]
    return ad.mul(ad.sum(ad.absolute(ad.sub(pred[-1], target[-1]))), 1.0 / K)


def _centered(Z: Node) -> Node:
    K = Z.shape[1]
    if K < 2:
        raise ValueError("variance/covariance terms need a batch of at least 2")
    return ad.sub(Z, ad.mean(Z, axis=1, keepdims=True))


def loss_var(Z, gamma: float = 1.0, eps: float = 1e-4) -> Node:
    Z = ad.const(Z)
    H, K, D = Z.shape
    c = _centered(Z)
    var = ad.mul(ad.sum(ad.square(c), axis=1), 1.0 / (K - 1))  # (H, D)
    std = ad.sqrt(ad.add(var, eps))
    return ad.mul(ad.sum(ad.hinge(ad.sub(gamma, std))), 1.0 / (H * D))


def loss_cov(Z) -> Node:
    Z = ad.const(Z)
    H, K, D = Z.shape
    c = _centered(Z)
    C = ad.mul(ad.matmul(ad.transpose(c), c), 1.0 / (K - 1))  # (H, D, D)
    off = ad.mul(C, 1.0 - np.eye(D))
    return ad.mul(ad.sum(ad.square(off)), 1.0 / (H * D))


def loss_idm(psi: Mapping, Z, A) -> Node:
    """Z: (H+1, K, D) consecutive latents, A: (H, K, 2) actions taken between them."""
    Z, A = ad.const(Z), ad.const(A)
    if Z.ndim != 3 or A.ndim != 3 or Z.shape[0] != A.shape[0] + 1 or Z.shape[1] != A.shape[1]:
        raise ValueError(f"idm shape mismatch: Z {Z.shape}, A {A.shape}")
    H, K = A.shape[:2]
    pred = idm_predict(psi, Z[:-1], Z[1:])
    return ad.mul(ad.sum(ad.square(ad.sub(A, pred))), 1.0 / (H * K))


def loss_total(batch: RolloutBatch, weights: LossWeights, psi: Mapping,
               disabled: frozenset[str] | set[str] = frozenset()) -> LossBreakdown:
    """Weighted sum of the five losses.

    A disabled term (or one with weight 0) is evaluated for logging only and
    left out of the gradient graph.
    """
    if weights.regularize_on == "online":
        seq = ad.concat([ad.reshape(batch.z0, (1,) + batch.z0.shape), batch.pred], axis=0)
    else:
        if batch.target0 is None:
            raise ValueError("target regularization needs the target latent of the first frame")
        seq = Node(np.concatenate([batch.target0[None], batch.target], axis=0))
    terms = {
        "tf": lambda: loss_tf(batch.pred, batch.target),
        "roll": lambda: loss_roll(batch.pred, batch.target),
        "var": lambda: loss_var(seq, weights.gamma, weights.eps),
        "cov": lambda: loss_cov(seq),
        "idm": lambda: loss_idm(psi, seq, batch.actions),
    }
    values: dict[str, float] = {}
    total: Node | None = None
    total_value = 0.0
    for name in LOSS_NAMES:
        node = terms[name]()
        values[name] = float(node.value)
        w = weights.weight(name)
        if name in disabled or w == 0.0:
            continue
        weighted = ad.mul(node, w)
        total = weighted if total is None else ad.add(total, weighted)
        total_value += w * values[name]
    if total is None:
        total = Node(0.0)
    return LossBreakdown(total=float(total.value), graph=total, **values)
