"""The four fusion-stage experts: spatial, context, boundary, shape.

Every expert maps (B, C, H, W) -> (B, C, H, W) and is the identity at
construction time (zero-initialized fuse/output projections), so stacking
them on a trained baseline starts as a no-op.
"""

from __future__ import annotations

import numpy as np

from .nn import BatchNorm2d, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    conv2d_depthwise,
    conv2d_pointwise,
    mul,
    mul_scalar,
    relu,
    reshape,
    sqrt_eps,
    transpose,
)

__all__ = [
    "FixedKernelBank",
    "coord_grid",
    "SpatialExpert",
    "ContextExpert",
    "BoundaryExpert",
    "ShapeExpert",
    "grid_to_tokens",
    "tokens_to_grid",
]

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
BLUR = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


class FixedKernelBank(Module):
    """Non-trainable depthwise edge/smoothing kernels, one copy per channel."""

    def __init__(self, channels: int, eps: float = 1e-6):
        def bank(k: np.ndarray) -> np.ndarray:
            return np.broadcast_to(k, (channels, 3, 3)).copy()

        self.sobel_x = Parameter(bank(SOBEL_X), kind="fixed_kernel", trainable=False)
        self.sobel_y = Parameter(bank(SOBEL_Y), kind="fixed_kernel", trainable=False)
        self.laplace = Parameter(bank(LAPLACE), kind="fixed_kernel", trainable=False)
        self.blur = Parameter(bank(BLUR), kind="fixed_kernel", trainable=False)
        self.eps = eps


def coord_grid(batch: int, height: int, width: int) -> Tensor:
    """Normalized coordinates in [-1, 1]: channel 0 is x, channel 1 is y.

    Border pixels sit exactly at the endpoints; a size-1 axis maps to 0.
    """
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    grid = np.empty((batch, 2, height, width))
    grid[:, 0] = xs[None, None, :]
    grid[:, 1] = ys[None, :, None]
    return Tensor(grid)


def grid_to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, HW, C); token t maps to (t // W, t % W)."""
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def tokens_to_grid(tokens: Tensor, height: int, width: int) -> Tensor:
    """(B, HW, C) -> (B, C, H, W), the inverse of :func:`grid_to_tokens`."""
    b, n, c = tokens.shape
    return reshape(transpose(tokens, (0, 2, 1)), (b, c, height, width))


class _ResidualExpert(Module):
    """Experts are x + branch(x); the branch is exposed separately so the
    fusion block can mix branches and keep a one-hot or all-zero routing
    outcome exact."""

    def branch(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return add(x, self.branch(x, training))


class SpatialExpert(_ResidualExpert):
    """Adds a projected coordinate grid: x + alpha * Conv1x1(G)."""

    def __init__(self, channels: int, alpha: float = 0.1):
        self.proj_weight = Parameter(np.zeros((channels, 2)), kind="weight")
        self.proj_bias = Parameter(np.zeros(channels), kind="bias")
        self.alpha = alpha

    def branch(self, x: Tensor, training: bool = False) -> Tensor:
        b, _, h, w = x.shape
        injected = conv2d_pointwise(coord_grid(b, h, w), self.proj_weight, self.proj_bias)
        return mul_scalar(injected, self.alpha)


class ContextExpert(_ResidualExpert):
    """Pre-norm self-attention and feed-forward over flattened pixels."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2):
        self.norm1 = LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, heads, rng, zero_out=True)
        self.norm2 = LayerNorm(channels)
        self.ffn_in = Linear(channels, channels * ffn_mult, rng)
        self.ffn_out = Linear(channels * ffn_mult, channels, zero_init=True)

    def branch(self, x: Tensor, training: bool = False) -> Tensor:
        b, c, h, w = x.shape
        tokens = grid_to_tokens(x)
        normed = self.norm1(tokens)
        attended = self.attn(normed, normed)
        mid = add(tokens, attended)
        ffn = self.ffn_out(relu(self.ffn_in(self.norm2(mid))))
        return tokens_to_grid(add(attended, ffn), h, w)


class _ConcatFuse(Module):
    """Shared tail: concat 3C channels, 1x1 conv to C, BN, ReLU."""

    def __init__(self, channels: int):
        self.fuse_weight = Parameter(np.zeros((channels, 3 * channels)), kind="weight")
        self.bn = BatchNorm2d(channels)

    def __call__(self, x: Tensor, extra_a: Tensor, extra_b: Tensor, training: bool) -> Tensor:
        stacked = concat([x, extra_a, extra_b], axis=1)
        fused = conv2d_pointwise(stacked, self.fuse_weight)
        return relu(self.bn(fused, training))


class BoundaryExpert(_ResidualExpert):
    """Injects Sobel gradient magnitude and orientation-sum responses."""

    def __init__(self, channels: int, bank: FixedKernelBank):
        self.bank = bank
        self.fuse = _ConcatFuse(channels)

    def branch(self, x: Tensor, training: bool = False) -> Tensor:
        gx = conv2d_depthwise(x, self.bank.sobel_x, padding="replicate")
        gy = conv2d_depthwise(x, self.bank.sobel_y, padding="replicate")
        magnitude = sqrt_eps(add(mul(gx, gx), mul(gy, gy)), self.bank.eps)
        return self.fuse(x, magnitude, add(gx, gy), training)


class ShapeExpert(_ResidualExpert):
    """Injects low-frequency blur and high-frequency Laplacian responses."""

    def __init__(self, channels: int, bank: FixedKernelBank):
        self.bank = bank
        self.fuse = _ConcatFuse(channels)

    def branch(self, x: Tensor, training: bool = False) -> Tensor:
        blurred = conv2d_depthwise(x, self.bank.blur, padding="replicate")
        lap = conv2d_depthwise(x, self.bank.laplace, padding="replicate")
        return self.fuse(x, blurred, lap, training)
