"""Mask decoding, the segmentation objective, and IoU metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Module
from .tensor import (
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    add_scalar,
    div,
    mul,
    mul_scalar,
    neg,
    sigmoid,
    softplus,
    sub,
    tmean,
    tsum,
    upsample_bilinear,
    conv2d_pointwise,
)

__all__ = [
    "DecodeHead",
    "MaskPrediction",
    "seg_loss",
    "total_loss",
    "MetricAccumulator",
    "compute_metrics",
]


class DecodeHead(Module):
    """1x1 conv to a single channel, then bilinear upsample to image size."""

    def __init__(self, channels: int, upsample_factor: int, rng: np.random.Generator):
        from .nn import uniform_fan_in

        self.weight = Parameter(uniform_fan_in(rng, (1, channels), channels), kind="weight")
        self.bias = Parameter(np.zeros(1), kind="bias")
        self.factor = upsample_factor

    def __call__(self, features: Tensor) -> "MaskPrediction":
        logits = conv2d_pointwise(features, self.weight, self.bias)
        return MaskPrediction(upsample_bilinear(logits, self.factor))


@dataclass
class MaskPrediction:
    logits: Tensor  # (B, 1, H, W) at image resolution

    @property
    def probabilities(self) -> np.ndarray:
        x = self.logits.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return (self.probabilities >= threshold).astype(np.uint8)


def _check_binary(gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ContractError("ground-truth mask must be binary")
    return gt


def seg_loss(pred: MaskPrediction, gt: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Pixel BCE plus per-sample Dice, equally weighted.

    BCE uses the stable identity bce(x, t) = softplus(x) - t*x.
    """
    gt = _check_binary(gt)
    logits = pred.logits
    b = logits.shape[0]
    if gt.shape != logits.shape:
        gt = gt.reshape(logits.shape)
    target = Tensor(gt)
    bce = tmean(sub(softplus(logits), mul(logits, target)))

    probs = sigmoid(logits)
    inter = tsum(mul(probs, target), axis=(1, 2, 3))
    denom = add(tsum(probs, axis=(1, 2, 3)), tsum(target, axis=(1, 2, 3)))
    dice_coeff = div(add_scalar(mul_scalar(inter, 2.0), smooth), add_scalar(denom, smooth))
    dice = tmean(add_scalar(neg(dice_coeff), 1.0))
    del b
    return add(bce, dice)


def total_loss(seg: Tensor, moe: Tensor) -> Tensor:
    """Training objective: task loss plus the (already weighted) routing losses."""
    return add(seg, moe)


def _kahan_add(total: float, comp: float, value: float) -> tuple[float, float]:
    y = value - comp
    t = total + y
    comp = (t - total) - y
    return t, comp


@dataclass
class MetricAccumulator:
    """Streaming mIoU/oIoU with order-independent merging.

    Per-sample IoU uses the convention empty-prediction vs empty-target = 1.
    Sums are compensated so merged partial accumulators agree with a single
    serial pass.
    """

    iou_sum: float = 0.0
    _iou_comp: float = 0.0
    n: int = 0
    intersection: float = 0.0
    union: float = 0.0
    per_sample: list = field(default_factory=list)

    def add(self, pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
        pred = np.asarray(pred_mask, dtype=bool)
        gt = _check_binary(gt_mask).astype(bool)
        if pred.shape != gt.shape:
            raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        inter = float(np.logical_and(pred, gt).sum())
        union = float(np.logical_or(pred, gt).sum())
        iou = 1.0 if union == 0 else inter / union
        self.iou_sum, self._iou_comp = _kahan_add(self.iou_sum, self._iou_comp, iou)
        self.n += 1
        self.intersection += inter
        self.union += union
        self.per_sample.append(iou)
        return iou

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        merged = MetricAccumulator()
        merged.per_sample = self.per_sample + other.per_sample
        merged.iou_sum = math.fsum(merged.per_sample)
        merged.n = self.n + other.n
        merged.intersection = self.intersection + other.intersection
        merged.union = self.union + other.union
        return merged

    @property
    def miou(self) -> float:
        if self.n == 0:
            raise ContractError("no samples accumulated")
        return math.fsum(self.per_sample) / self.n

    @property
    def oiou(self) -> float:
        if self.n == 0:
            raise ContractError("no samples accumulated")
        return 1.0 if self.union == 0 else self.intersection / self.union

    def report(self, split: str, per_expert_stats=None) -> dict:
        return {
            "split": split,
            "mIoU": 100.0 * self.miou,
            "oIoU": 100.0 * self.oiou,
            "n_samples": self.n,
            "per_expert_stats": per_expert_stats,
        }


def compute_metrics(acc: MetricAccumulator) -> tuple[float, float]:
    return acc.miou, acc.oiou
