"""Fusion block: four experts under a Top-K router with auxiliary losses.

Expert order is fixed (0 spatial, 1 context, 2 boundary, 3 shape) so routing
statistics are comparable across runs.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .experts import BoundaryExpert, ContextExpert, FixedKernelBank, ShapeExpert, SpatialExpert
from .nn import Module, rng_for
from .routing import (
    MoeLossWeights,
    RouterConfig,
    RoutingDecision,
    TopKRouter,
    aggregate_experts,
    moe_loss,
)
from .tensor import Tensor, add

__all__ = ["FusionBlock", "EXPERT_NAMES"]

EXPERT_NAMES = ("spatial", "context", "boundary", "shape")


class FusionBlock(Module):
    def __init__(
        self,
        channels: int,
        router_cfg: RouterConfig,
        loss_weights: MoeLossWeights,
        seed: int,
        heads: int = 4,
        spatial_alpha: float = 0.1,
        name: str = "fusion",
    ):
        if router_cfg.num_experts != len(EXPERT_NAMES):
            raise ValueError(f"fusion block hosts exactly {len(EXPERT_NAMES)} experts")
        self.bank = FixedKernelBank(channels)
        self.experts = [
            SpatialExpert(channels, alpha=spatial_alpha),
            ContextExpert(channels, heads, rng_for(seed, f"{name}.context")),
            BoundaryExpert(channels, self.bank),
            ShapeExpert(channels, self.bank),
        ]
        self.router = TopKRouter(channels, router_cfg, rng_for(seed, f"{name}.router"))
        self.loss_weights = loss_weights

    def __call__(
        self,
        x: Tensor,
        training: bool,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, RoutingDecision, Tensor]:
        decision = self.router(x, training, rng)
        if training:
            # Eager evaluation keeps BN statistics flowing for every expert.
            branches = [expert.branch(x, training=True) for expert in self.experts]
            aux = moe_loss(decision, self.loss_weights, training=True)
        else:
            active = decision.weights.data.any(axis=0)
            branches = [
                expert.branch(x, training=False) if active[i] else None
                for i, expert in enumerate(self.experts)
            ]
            aux = Tensor(0.0)
        # Experts are residual (E_i(x) = x + b_i(x)), and the routing weights
        # sum to one, so sum_i w_i E_i(x) = x + sum_i w_i b_i(x). The right
        # side keeps identity-at-init and one-hot selection exact.
        refined = add(x, aggregate_experts(branches, decision))
        return refined, decision, aux
