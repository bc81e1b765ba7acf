"""Expression-conditioned residual adapter inserted into backbone blocks.

Pipeline: down-project tokens, split prefix from spatial, reshape spatial
tokens to a grid, enrich with multi-scale convolutions, apply two softly
routed refinement experts, attend to the text embedding, and project back
up. The up-projection is zero-initialized so a fresh adapter is a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .experts import grid_to_tokens, tokens_to_grid
from .nn import BatchNorm2d, Linear, Module, MultiHeadAttention, rng_for, uniform_fan_in
from .routing import SoftRouter
from .tensor import (
    ConfigError,
    ContractError,
    Parameter,
    Tensor,
    add,
    concat,
    conv2d_depthwise,
    conv2d_pointwise,
    crop,
    mul,
    mul_scalar,
    relu,
    reshape,
)

__all__ = [
    "AdapterConfig",
    "AdapterBoundaryExpert",
    "AdapterSpatialExpert",
    "MultiScaleContext",
    "CrossModalAttention",
    "Adapter",
]


@dataclass
class AdapterConfig:
    backbone_dim: int = 128
    adapter_dim: int = 64
    prefix_count: int = 5  # class token + registers
    text_dim: int = 64
    heads: int = 4
    # The residual scales inside each expert differ from the scales that mix
    # the two expert outputs; both pairs are fixed, never trained.
    expert_alpha: float = 0.3
    expert_beta: float = 0.1
    mix_alpha: float = 0.25
    mix_beta: float = 0.15
    bn_eval_in_train: bool = False  # force running statistics even while training

    def __post_init__(self):
        if self.adapter_dim > self.backbone_dim:
            raise ConfigError("adapter width must not exceed the backbone width")
        if self.prefix_count < 1:
            raise ConfigError("at least the class token must be present")


def _dw_kernel(rng: np.random.Generator, channels: int, k: int) -> Parameter:
    return Parameter(uniform_fan_in(rng, (channels, k, k), k * k), kind="weight")


class AdapterBoundaryExpert(Module):
    """ReLU(BN(g + beta * DWConv3x3(g))) with a fixed beta."""

    def __init__(self, channels: int, beta: float, rng: np.random.Generator):
        self.kernel = _dw_kernel(rng, channels, 3)
        self.bn = BatchNorm2d(channels)
        self.beta = beta

    def __call__(self, g: Tensor, training: bool) -> Tensor:
        edge = mul_scalar(conv2d_depthwise(g, self.kernel, padding="zero"), self.beta)
        return relu(self.bn(add(g, edge), training))


class AdapterSpatialExpert(Module):
    """ReLU(BN(DWConv3x3(g))) + alpha * g with a fixed alpha."""

    def __init__(self, channels: int, alpha: float, rng: np.random.Generator):
        self.kernel = _dw_kernel(rng, channels, 3)
        self.bn = BatchNorm2d(channels)
        self.alpha = alpha

    def __call__(self, g: Tensor, training: bool) -> Tensor:
        smoothed = relu(self.bn(conv2d_depthwise(g, self.kernel, padding="zero"), training))
        return add(smoothed, mul_scalar(g, self.alpha))


class MultiScaleContext(Module):
    """Parallel 1x1 pointwise, 3x3 and 5x5 depthwise branches, summed."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.pw_weight = Parameter(uniform_fan_in(rng, (channels, channels), channels), kind="weight")
        self.pw_bias = Parameter(np.zeros(channels), kind="bias")
        self.dw3 = _dw_kernel(rng, channels, 3)
        self.dw3_bias = Parameter(np.zeros(channels), kind="bias")
        self.dw5 = _dw_kernel(rng, channels, 5)
        self.dw5_bias = Parameter(np.zeros(channels), kind="bias")

    def __call__(self, g: Tensor) -> Tensor:
        branches = add(
            add(
                conv2d_pointwise(g, self.pw_weight, self.pw_bias),
                conv2d_depthwise(g, self.dw3, self.dw3_bias, padding="zero"),
            ),
            conv2d_depthwise(g, self.dw5, self.dw5_bias, padding="zero"),
        )
        return add(g, branches)


class CrossModalAttention(Module):
    """Visual tokens attend to the expression embedding; residual inside.

    The output projection keeps its standard init: the adapter's whole-module
    no-op at construction comes from the zero up-projection, and a live text
    path from step one lets the up-projection's first gradients already carry
    expression-dependent signal (a zero output projection here would stack
    two zero factors and stall text grounding).
    """

    def __init__(self, dim: int, text_dim: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng, kv_dim=text_dim, zero_out=False)

    def __call__(self, tokens: Tensor, text: Tensor) -> Tensor:
        if tokens.shape[0] != text.shape[0]:
            raise ContractError(f"batch mismatch: {tokens.shape[0]} tokens vs {text.shape[0]} text")
        return add(tokens, self.attn(tokens, text))


class Adapter(Module):
    def __init__(self, cfg: AdapterConfig, seed: int, name: str):
        d = cfg.adapter_dim
        self.cfg = cfg
        self.down = Linear(cfg.backbone_dim, d, rng_for(seed, f"{name}.down"))
        self.mscale = MultiScaleContext(d, rng_for(seed, f"{name}.mscale"))
        self.spatial_expert = AdapterSpatialExpert(d, cfg.expert_alpha, rng_for(seed, f"{name}.spatial"))
        self.boundary_expert = AdapterBoundaryExpert(d, cfg.expert_beta, rng_for(seed, f"{name}.boundary"))
        self.router = SoftRouter(d, rng_for(seed, f"{name}.router"))
        self.xattn = CrossModalAttention(d, cfg.text_dim, cfg.heads, rng_for(seed, f"{name}.xattn"))
        self.up = Linear(d, cfg.backbone_dim, zero_init=True)

    def __call__(self, x: Tensor, text: Tensor, training: bool) -> Tensor:
        cfg = self.cfg
        b, p, _ = x.shape
        n = p - cfg.prefix_count
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ContractError(f"{n} spatial tokens do not form a square grid")
        bn_training = training and not cfg.bn_eval_in_train

        projected = relu(self.down(x))
        prefix = crop(projected, (slice(None), slice(0, cfg.prefix_count), slice(None)))
        spatial = crop(projected, (slice(None), slice(cfg.prefix_count, p), slice(None)))

        route_weights = self.router(spatial)  # (B, 2): spatial, boundary
        grid = tokens_to_grid(spatial, side, side)
        rich = self.mscale(grid)
        spatial_out = self.spatial_expert(rich, bn_training)
        boundary_out = self.boundary_expert(rich, bn_training)
        w_s = reshape(crop(route_weights, (slice(None), slice(0, 1))), (b, 1, 1, 1))
        w_b = reshape(crop(route_weights, (slice(None), slice(1, 2))), (b, 1, 1, 1))
        corrected = add(
            rich,
            add(
                mul_scalar(mul(spatial_out, w_s), cfg.mix_alpha),
                mul_scalar(mul(boundary_out, w_b), cfg.mix_beta),
            ),
        )

        attended = self.xattn(grid_to_tokens(corrected), text)
        merged = add(concat([prefix, attended], axis=1), projected)
        return self.up(merged)
