"""Module base class, parameter initialization, and common layers."""

from __future__ import annotations

import hashlib
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    ConfigError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    layer_norm,
    masked_softmax,
    matmul,
    mul_scalar,
    relu,
    reshape,
    softmax,
    transpose,
)

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "BatchNorm2d",
    "MultiHeadAttention",
    "rng_for",
    "uniform_fan_in",
]


def rng_for(seed: int, name: str) -> np.random.Generator:
    """A generator keyed by (seed, name), independent of construction order.

    Submodules draw initial weights from their own stream, so enabling or
    disabling one component never shifts another component's initialization.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=words)))


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal container: attribute reflection gives deterministic traversal."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(prefix=path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        own = getattr(self, "_buffers", None)
        if own:
            for key, value in own.items():
                yield f"{prefix}{key}", value
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix=f"{prefix}{key}.")

    def finalize_names(self, prefix: str = "") -> None:
        """Assign hierarchical names to every parameter (checkpoint keys)."""
        for name, p in self.named_parameters(prefix=prefix):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """y = x @ W + b over the last axis."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: Optional[np.random.Generator] = None,
        *,
        zero_init: bool = False,
        bias: bool = True,
    ):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            if rng is None:
                raise ConfigError("Linear needs an rng unless zero_init is set")
            w = uniform_fan_in(rng, (in_dim, out_dim), in_dim)
        self.weight = Parameter(w, kind="weight")
        self.bias = Parameter(np.zeros(out_dim), kind="bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.scale = Parameter(np.ones(dim), kind="norm_scale")
        self.shift = Parameter(np.zeros(dim), kind="norm_shift")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale, self.shift, eps=self.eps)


class BatchNorm2d(Module):
    """Channel batch norm with running statistics (population variance)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.scale = Parameter(np.ones(channels), kind="norm_scale")
        self.shift = Parameter(np.zeros(channels), kind="norm_shift")
        self.eps = eps
        self.momentum = momentum
        self._buffers = {
            "running_mean": np.zeros(channels),
            "running_var": np.ones(channels),
            "batches_tracked": np.zeros((), dtype=np.float64),
        }

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out, tracked = batch_norm(
            x,
            self.scale,
            self.shift,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=training,
            momentum=self.momentum,
            eps=self.eps,
            batches_tracked=int(self._buffers["batches_tracked"]),
        )
        self._buffers["batches_tracked"][...] = tracked
        return out


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head splitting.

    Self-attention when called with q is kv; cross-attention otherwise. The
    kv sequence may carry its own feature width (``kv_dim``); all heads share
    one output projection. ``zero_out`` zero-initializes the output
    projection so residual callers start as the identity.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        *,
        kv_dim: Optional[int] = None,
        zero_out: bool = False,
    ):
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.dim = dim
        self.wq = Linear(dim, dim, rng)
        # A key bias shifts all scores in a row equally, which softmax
        # cancels; it is omitted so no parameter is a dead direction.
        self.wk = Linear(kv_dim, dim, rng, bias=False)
        self.wv = Linear(kv_dim, dim, rng)
        self.wo = Linear(dim, dim, rng, zero_init=zero_out)

    def __call__(self, q: Tensor, kv: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        if q.shape[0] != kv.shape[0]:
            raise ShapeError(f"attention batch mismatch: {q.shape} vs {kv.shape}")
        b, tq, _ = q.shape
        tk = kv.shape[1]
        dh = self.dim // self.heads

        def split(x: Tensor, t: int) -> Tensor:
            x = reshape(x, (b, t, self.heads, dh))
            return transpose(x, (0, 2, 1, 3))

        qh = split(self.wq(q), tq)
        kh = split(self.wk(kv), tk)
        vh = split(self.wv(kv), tk)
        scores = mul_scalar(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if key_mask is None:
            attn = softmax(scores, axis=-1)
        else:
            mask = np.asarray(key_mask, dtype=bool).reshape(b, 1, 1, tk)
            attn = masked_softmax(scores, np.broadcast_to(mask, scores.shape), axis=-1)
        ctx = matmul(attn, vh)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, tq, self.dim))
        return self.wo(ctx)
