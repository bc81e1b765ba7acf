"""Soft and sparse Top-K expert routing, plus the collapse-mitigation losses.

The adapter side uses dense soft routing over two experts; the fusion side
uses noisy-temperature Top-K gating over four. Auxiliary losses (squared
logit penalty, utilization balance, selection-fraction balance) are active
only in training mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn import Linear, Module
from .tensor import (
    ConfigError,
    ContractError,
    ShapeError,
    Tensor,
    add,
    crop,
    div,
    global_avg_pool,
    masked_softmax,
    mul,
    mul_scalar,
    pow_scalar,
    relu,
    reshape,
    softmax,
    sub,
    tmean,
    tsum,
)

__all__ = [
    "RouterConfig",
    "MoeLossWeights",
    "RoutingDecision",
    "SoftRouter",
    "TopKRouter",
    "aggregate_experts",
    "z_loss",
    "balance_loss",
    "token_fraction_loss",
    "moe_loss",
    "RoutingStats",
    "routing_stats",
    "write_routing_stats_csv",
]


@dataclass
class RouterConfig:
    num_experts: int = 4
    top_k: int = 4
    temperature: float = 1.0
    noise_std: float = 0.1
    hidden_dim: Optional[int] = None  # defaults to max(C // 2, 8)

    def __post_init__(self):
        if not (1 <= self.top_k <= self.num_experts):
            raise ConfigError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


@dataclass
class MoeLossWeights:
    # Single squared-logit penalty by default: the z-loss coefficient stays 0
    # while the logit coefficient is active (same algebraic form).
    z: float = 0.0
    logit: float = 1e-3
    balance: float = 1e-2
    token: float = 1e-2

    def __post_init__(self):
        if min(self.z, self.logit, self.balance, self.token) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class RoutingDecision:
    """Per-sample routing outcome: raw logits, perturbed logits, sparse weights."""

    logits: Tensor  # (B, E)
    noisy_logits: Tensor  # (B, E): (logits + noise)/temperature
    weights: Tensor  # (B, E), exactly K nonzeros per row
    selected: np.ndarray  # (B, K) int64 expert indices

    @property
    def num_experts(self) -> int:
        return self.logits.shape[1]


class SoftRouter(Module):
    """Dense two-way router: mean-pool tokens, linear, softmax."""

    def __init__(self, dim: int, rng: np.random.Generator, num_experts: int = 2):
        self.linear = Linear(dim, num_experts, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.data.ndim != 3 or tokens.shape[1] < 1:
            raise ContractError(f"soft router needs (B, N>=1, d) tokens, got {tokens.shape}")
        pooled = tmean(tokens, axis=1)
        return softmax(self.linear(pooled), axis=-1)


def topk_select(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties resolve to lower indices."""
    order = np.argsort(-values, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k].astype(np.int64))


class TopKRouter(Module):
    """Two-layer MLP router with training-time Gaussian logit perturbation."""

    def __init__(self, channels: int, cfg: RouterConfig, rng: np.random.Generator):
        hidden = cfg.hidden_dim if cfg.hidden_dim is not None else max(channels // 2, 8)
        self.cfg = cfg
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, cfg.num_experts, rng)

    def __call__(
        self,
        x: Tensor,
        training: bool,
        rng: Optional[np.random.Generator] = None,
    ) -> RoutingDecision:
        cfg = self.cfg
        pooled = global_avg_pool(x)
        logits = self.fc2(relu(self.fc1(pooled)))
        b, e = logits.shape
        if training and cfg.noise_std > 0:
            if rng is None:
                raise ContractError("training-mode routing with noise needs an rng")
            noise = Tensor(rng.normal(0.0, cfg.noise_std, size=(b, e)))
            noisy = mul_scalar(add(logits, noise), 1.0 / cfg.temperature)
        else:
            noisy = mul_scalar(logits, 1.0 / cfg.temperature)
        selected = topk_select(noisy.data, cfg.top_k)
        mask = np.zeros((b, e), dtype=bool)
        np.put_along_axis(mask, selected, True, axis=1)
        weights = masked_softmax(noisy, mask, axis=-1)
        return RoutingDecision(logits=logits, noisy_logits=noisy, weights=weights, selected=selected)


def aggregate_experts(expert_outputs: Sequence[Optional[Tensor]], decision: RoutingDecision) -> Tensor:
    """Per-sample weighted sum over experts.

    Entries for experts with all-zero weight may be None (lazy evaluation);
    they contribute nothing either way.
    """
    shapes = {t.shape for t in expert_outputs if t is not None}
    if len(shapes) != 1:
        raise ShapeError(f"expert outputs disagree on shape: {sorted(shapes)}")
    w = decision.weights
    b, e = w.shape
    if len(expert_outputs) != e:
        raise ShapeError(f"{len(expert_outputs)} expert outputs for {e} routing columns")
    out: Optional[Tensor] = None
    extra = (1,) * (next(iter(shapes)).__len__() - 1)
    for i, expert_out in enumerate(expert_outputs):
        col = w.data[:, i]
        if not col.any():
            continue
        if expert_out is None:
            raise ContractError(f"expert {i} has nonzero weight but no output")
        wi = reshape(crop(w, (slice(None), slice(i, i + 1))), (b,) + extra)
        term = mul(expert_out, wi)
        out = term if out is None else add(out, term)
    if out is None:
        raise ContractError("all routing weights are zero")
    return out


# --------------------------------------------------------------------------
# Auxiliary losses
# --------------------------------------------------------------------------

def z_loss(logits: Tensor, weight: float) -> Tensor:
    """weight * mean of squared router logits."""
    return mul_scalar(tmean(pow_scalar(logits, 2.0)), weight)


def _cv_squared(vec: Tensor) -> Tensor:
    mean = tmean(vec)
    centered = sub(vec, mean)
    variance = tmean(mul(centered, centered))
    return div(variance, mul(mean, mean))


def balance_loss(weights: Tensor, coefficient: float) -> Tensor:
    """Squared coefficient of variation of per-expert routing mass.

    Zero iff utilization is uniform; a one-hot utilization over E experts
    gives exactly E - 1 (population standard deviation).
    """
    total = float(weights.data.sum())
    if total <= 0:
        raise ContractError("balance_loss needs nonzero routing mass")
    per_expert = tsum(weights, axis=0)
    usage = div(per_expert, tsum(weights))
    return mul_scalar(_cv_squared(usage), coefficient)


def token_fraction_loss(selected: np.ndarray, num_experts: int, coefficient: float) -> Tensor:
    """CV^2 of per-expert selection frequency over the batch.

    Selection is discrete, so this term is piecewise constant in the
    parameters: it reports imbalance but routes no gradient.
    """
    counts = np.bincount(selected.reshape(-1), minlength=num_experts).astype(np.float64)
    fractions = counts / selected.shape[0]
    mean = fractions.mean()
    cv2 = fractions.var() / (mean * mean)
    return Tensor(coefficient * cv2)


def moe_loss(decision: RoutingDecision, weights: MoeLossWeights, training: bool) -> Tensor:
    """logit penalty + utilization balance + selection-fraction balance."""
    if not training:
        raise ContractError("moe_loss is a training-only quantity")
    total = z_loss(decision.logits, weights.logit)
    if weights.z > 0:
        total = add(total, z_loss(decision.logits, weights.z))
    total = add(total, balance_loss(decision.weights, weights.balance))
    total = add(total, token_fraction_loss(decision.selected, decision.num_experts, weights.token))
    return total


# --------------------------------------------------------------------------
# Analysis
# --------------------------------------------------------------------------

@dataclass
class RoutingStats:
    mean_weight: np.ndarray  # (E,) sums to 1 across experts
    selection_freq: np.ndarray  # (E,) fraction of samples whose Top-K includes the expert
    n_samples: int = 0
    rows: list = field(default_factory=list)


def routing_stats(decisions: Sequence[RoutingDecision]) -> RoutingStats:
    if not decisions:
        raise ContractError("routing_stats needs at least one decision")
    e = decisions[0].num_experts
    weight_sum = np.zeros(e)
    count_sum = np.zeros(e)
    n = 0
    for d in decisions:
        weight_sum += d.weights.data.sum(axis=0)
        count_sum += np.bincount(d.selected.reshape(-1), minlength=e)
        n += d.weights.shape[0]
    return RoutingStats(mean_weight=weight_sum / n, selection_freq=count_sum / n, n_samples=n)


def write_routing_stats_csv(stats: RoutingStats, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert_id", "mean_weight", "selection_freq"])
        for i in range(stats.mean_weight.shape[0]):
            writer.writerow([i, repr(float(stats.mean_weight[i])), repr(float(stats.selection_freq[i]))])
