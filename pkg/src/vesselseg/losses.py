"""Segmentation losses: focal-Tversky, multi-scale aggregation, the two
Siamese terms (supervised and consistency) and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .deformation import DeformationField, warp


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class FocalTverskyParams:
    alpha: float = 0.7   # false-negative weight
    beta: float = 0.3    # false-positive weight
    gamma: float = 4.0 / 3.0
    epsilon: float = 1e-6

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0 or not math.isclose(self.alpha + self.beta, 1.0):
            raise LossError(f"alpha={self.alpha}, beta={self.beta} must be non-negative and sum to 1")
        if self.gamma <= 0:
            raise LossError("gamma must be positive")
        if self.epsilon < 0:
            raise LossError("epsilon must be non-negative")


@dataclass(frozen=True)
class MssWeights:
    alphas: tuple[float, ...] = (1.0, 0.75, 0.5)

    def __post_init__(self):
        if any(a < 0 for a in self.alphas) or not any(a > 0 for a in self.alphas):
            raise LossError(f"weights {self.alphas} must be non-negative with one positive")

    @classmethod
    def default(cls, m: int) -> "MssWeights":
        base = (1.0, 0.75, 0.5)
        if m <= len(base):
            return cls(base[:m])
        return cls(tuple(max(1.0 - 0.25 * i, 0.25) for i in range(m)))


@dataclass
class MssLossBreakdown:
    """Per-scale losses and their weighted mean, each of shape () or (batch,)."""

    per_scale: list[Tensor]
    weights: MssWeights
    total: Tensor

    @property
    def batch_size(self) -> int:
        shape = self.total.shape
        return shape[0] if shape else 1


@dataclass(frozen=True)
class ConsistencyCriterion:
    kind: str = "mse"
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mse", "focal-tversky"):
            raise LossError(f"unknown consistency criterion {self.kind!r}")
        if self.weight < 0:
            raise LossError("consistency weight must be non-negative")


def _spatial_axes(x: Tensor, per_sample: bool):
    if per_sample:
        return tuple(range(1, x.data.ndim))
    return None


def focal_tversky(p, g, params: FocalTverskyParams = FocalTverskyParams(), per_sample: bool = False) -> Tensor:
    """(1 - TI) ** (1 / gamma) with TI the smoothed Tversky index.

    ``g`` may be soft (used by the consistency variant). With ``per_sample``
    the sums run over all axes but the first and a (batch,) tensor returns.
    """
    params.validate()
    p = ad.as_tensor(p)
    g = ad.as_tensor(g, dtype=p.dtype)
    if p.shape != g.shape:
        raise LossError(f"prediction {p.shape} and target {g.shape} differ in shape")
    axes = _spatial_axes(p, per_sample)
    tp = (p * g).sum(axis=axes)
    fn = ((1.0 - p) * g).sum(axis=axes)
    fp = (p * (1.0 - g)).sum(axis=axes)
    ti = (tp + params.epsilon) / (tp + params.alpha * fn + params.beta * fp + params.epsilon)
    return (1.0 - ti) ** (1.0 / params.gamma)


def weighted_mean(losses: Sequence, weights: MssWeights):
    """Weighted mean of per-scale losses, normalised by the weight sum."""
    if len(losses) != len(weights.alphas):
        raise LossError(f"{len(losses)} scales but {len(weights.alphas)} weights")
    norm = sum(weights.alphas)
    acc = None
    for a, loss in zip(weights.alphas, losses):
        term = loss * (a / norm)
        acc = term if acc is None else acc + term
    return acc


def mss_loss(outputs, y, w: MssWeights | None = None,
             ft: FocalTverskyParams = FocalTverskyParams(), per_sample: bool = True) -> MssLossBreakdown:
    """Focal-Tversky at every supervision scale, combined by ``weighted_mean``."""
    scales = list(outputs.scales if hasattr(outputs, "scales") else outputs)
    w = w or MssWeights.default(len(scales))
    if len(scales) != len(w.alphas):
        raise LossError(f"{len(scales)} outputs but {len(w.alphas)} weights")
    per_scale = [focal_tversky(s, y, ft, per_sample=per_sample) for s in scales]
    return MssLossBreakdown(per_scale, w, weighted_mean(per_scale, w))


def supervised_loss(branch1: MssLossBreakdown, branch2: MssLossBreakdown | None) -> Tensor:
    """Batch mean of the per-sample sum of both branch losses.

    ``branch2=None`` is the single-branch ablation.
    """
    total = branch1.total
    if branch2 is not None:
        if branch2.total.shape != total.shape:
            raise LossError(f"batch sizes differ: {total.shape} vs {branch2.total.shape}")
        total = total + branch2.total
    return total.mean() if total.shape else total


def consistency_loss(y1, y2, t: DeformationField,
                     crit: ConsistencyCriterion = ConsistencyCriterion()) -> Tensor:
    """Disagreement between warp(y1, t) and y2, both probability tensors.

    Gradients flow into both arguments.
    """
    y1 = ad.as_tensor(y1)
    y2 = ad.as_tensor(y2)
    if y1.shape != y2.shape:
        raise LossError(f"shapes {y1.shape} and {y2.shape} differ")
    warped = warp(y1, t)
    if crit.kind == "mse":
        d = warped - y2
        return (d * d).mean()
    per = focal_tversky(warped, y2, per_sample=y1.data.ndim == 5)
    return per.mean() if per.shape else per


def total_loss(sup, cons, crit: ConsistencyCriterion = ConsistencyCriterion()):
    for name, val in (("supervised", sup), ("consistency", cons)):
        raw = val.data if isinstance(val, Tensor) else np.asarray(val)
        if not np.isfinite(raw).all():
            raise LossError(f"{name} loss is not finite")
    if crit.weight == 0:
        return sup
    return sup + cons * crit.weight
