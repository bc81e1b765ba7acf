"""Small vision transformer with prefix tokens, a text encoder, and the
bias/normalization freeze policy.

The encoders train from random initialization but are treated exactly like
frozen pretrained backbones: under the default policy only bias and
normalization parameters inside them stay trainable (well under 1% of the
backbone parameter count), while adapter, fusion, and head parameters train
in full.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapter import Adapter, AdapterConfig
from .nn import LayerNorm, Linear, Module, MultiHeadAttention, rng_for
from .tensor import (
    ConfigError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    crop,
    div,
    embedding,
    mul,
    mul_scalar,
    relu,
    reshape,
    transpose,
    tsum,
)

__all__ = [
    "BackboneConfig",
    "VisionEncoder",
    "TextEncoder",
    "FreezePolicy",
    "FreezeReport",
    "apply_freeze_policy",
]


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 6
    dim: int = 128
    heads: int = 4
    register_count: int = 4
    adapter_blocks: tuple[int, ...] = (1, 3, 5)
    adapter_scale: float = 0.1  # contribution of the adapter branch
    text_vocab: int = 96
    text_dim: int = 64
    text_depth: int = 2
    text_heads: int = 4
    text_max_len: int = 24
    ffn_mult: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image size must be divisible by patch size")
        if any(not 0 <= i < self.depth for i in self.adapter_blocks):
            raise ConfigError("adapter block indices out of range")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def prefix_count(self) -> int:
        return 1 + self.register_count

    @property
    def token_count(self) -> int:
        return self.prefix_count + self.grid_side**2


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn_in = Linear(dim, dim * ffn_mult, rng)
        self.ffn_out = Linear(dim * ffn_mult, dim, rng)
        self.adapter: Optional[Adapter] = None
        self.adapter_scale = 0.0

    def feed_forward(self, x: Tensor) -> Tensor:
        return self.ffn_out(relu(self.ffn_in(self.norm2(x))))

    def __call__(
        self,
        x: Tensor,
        text: Optional[Tensor],
        training: bool,
        key_mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        normed = self.norm1(x)
        x = add(x, self.attn(normed, normed, key_mask=key_mask))
        update = self.feed_forward(x)
        if self.adapter is not None and self.adapter_scale != 0.0:
            correction = mul_scalar(self.adapter(x, text, training), self.adapter_scale)
            update = add(update, correction)
        return add(x, update)


class VisionEncoder(Module):
    def __init__(self, cfg: BackboneConfig, adapter_cfg: Optional[AdapterConfig], seed: int):
        self.cfg = cfg
        patch_dim = 3 * cfg.patch_size**2
        self.patch_embed = Linear(patch_dim, cfg.dim, rng_for(seed, "visual.patch_embed"))
        tok_rng = rng_for(seed, "visual.tokens")
        self.class_token = Parameter(tok_rng.normal(0.0, 0.02, (1, 1, cfg.dim)), kind="weight")
        self.registers = Parameter(
            tok_rng.normal(0.0, 0.02, (1, cfg.register_count, cfg.dim)), kind="weight"
        )
        self.pos_embed = Parameter(
            rng_for(seed, "visual.pos_embed").normal(0.0, 0.02, (1, cfg.token_count, cfg.dim)),
            kind="weight",
        )
        self.blocks = [
            TransformerBlock(cfg.dim, cfg.heads, cfg.ffn_mult, rng_for(seed, f"visual.blocks.{i}"))
            for i in range(cfg.depth)
        ]
        if adapter_cfg is not None:
            for i in cfg.adapter_blocks:
                self.blocks[i].adapter = Adapter(adapter_cfg, seed, f"visual.blocks.{i}.adapter")
                self.blocks[i].adapter_scale = cfg.adapter_scale
        self.final_norm = LayerNorm(cfg.dim)

    def patchify(self, images: Tensor) -> Tensor:
        cfg = self.cfg
        b = images.shape[0]
        if images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected (B, 3, {cfg.image_size}, {cfg.image_size}) images, got {images.shape}"
            )
        g, p = cfg.grid_side, cfg.patch_size
        x = reshape(images, (b, 3, g, p, g, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        return reshape(x, (b, g * g, 3 * p * p))

    def __call__(self, images: Tensor, text: Optional[Tensor], training: bool) -> Tensor:
        b = images.shape[0]
        tokens = self.patch_embed(self.patchify(images))
        cls = add(Tensor(np.zeros((b, 1, self.cfg.dim))), self.class_token)
        regs = add(Tensor(np.zeros((b, self.cfg.register_count, self.cfg.dim))), self.registers)
        tokens = concat([cls, regs, tokens], axis=1)
        tokens = add(tokens, self.pos_embed)
        for block in self.blocks:
            tokens = block(tokens, text, training)
        return self.final_norm(tokens)


class TextEncoder(Module):
    """Token embeddings, two transformer blocks, masked mean pooling."""

    BOS = 0  # reserved id; guarantees every sequence is non-empty

    def __init__(self, cfg: BackboneConfig, seed: int):
        self.cfg = cfg
        rng = rng_for(seed, "text.embed")
        self.table = Parameter(rng.normal(0.0, 0.02, (cfg.text_vocab, cfg.text_dim)), kind="weight")
        self.pos_embed = Parameter(
            rng_for(seed, "text.pos_embed").normal(0.0, 0.02, (1, cfg.text_max_len, cfg.text_dim)),
            kind="weight",
        )
        self.blocks = [
            TransformerBlock(cfg.text_dim, cfg.text_heads, cfg.ffn_mult, rng_for(seed, f"text.blocks.{i}"))
            for i in range(cfg.text_depth)
        ]
        self.final_norm = LayerNorm(cfg.text_dim)

    def pad_batch(self, expressions: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Prepend BOS, pad to a common length; returns (ids, valid mask)."""
        rows = [[self.BOS] + list(ids) for ids in expressions]
        longest = max(len(r) for r in rows)
        if longest > self.cfg.text_max_len:
            raise ConfigError(f"expression length {longest} exceeds limit {self.cfg.text_max_len}")
        ids = np.zeros((len(rows), longest), dtype=np.int64)
        mask = np.zeros((len(rows), longest), dtype=bool)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = row
            mask[i, : len(row)] = True
        return ids, mask

    def __call__(self, expressions: list[list[int]], training: bool) -> Tensor:
        for ids in expressions:
            for t in ids:
                if not 0 <= t < self.cfg.text_vocab:
                    raise ShapeError(f"token id {t} outside vocabulary of {self.cfg.text_vocab}")
        ids, mask = self.pad_batch(expressions)
        b, length = ids.shape
        tokens = embedding(self.table, ids)
        tokens = add(tokens, crop(self.pos_embed, (slice(None), slice(0, length), slice(None))))
        for block in self.blocks:
            tokens = block(tokens, None, training, key_mask=mask)
        tokens = self.final_norm(tokens)
        keep = Tensor(mask.astype(np.float64)[:, :, None])
        counts = Tensor(mask.sum(axis=1).astype(np.float64)[:, None, None])
        pooled = div(tsum(mul(tokens, keep), axis=1, keepdims=True), counts)
        return pooled  # (B, 1, text_dim)


# --------------------------------------------------------------------------
# Freeze policy
# --------------------------------------------------------------------------

@dataclass
class FreezePolicy:
    """Maps (parameter name, kind) to a trainable flag.

    Backbone-scoped parameters (visual/text prefixes, excluding inserted
    adapters) stay frozen unless their kind appears in ``trainable_kinds``.
    Everything else trains, except fixed kernels which never do.
    """

    backbone_prefixes: tuple[str, ...] = ("visual.", "text.")
    trainable_kinds: tuple[str, ...] = ("bias", "norm_scale", "norm_shift")
    freeze_everything: bool = False

    def trainable(self, name: str, kind: str) -> bool:
        if kind == "fixed_kernel":
            return False
        if self.freeze_everything:
            return False
        if self.in_backbone_scope(name):
            return kind in self.trainable_kinds
        return True

    def in_backbone_scope(self, name: str) -> bool:
        return name.startswith(self.backbone_prefixes) and ".adapter." not in name


@dataclass
class FreezeReport:
    backbone_total: int
    backbone_trainable: int
    model_total: int
    model_trainable: int

    @property
    def backbone_fraction(self) -> float:
        return self.backbone_trainable / self.backbone_total if self.backbone_total else 0.0


def apply_freeze_policy(model: Module, policy: FreezePolicy) -> FreezeReport:
    backbone_total = backbone_trainable = model_total = model_trainable = 0
    for name, p in model.named_parameters():
        flag = policy.trainable(name, p.kind)
        p.set_trainable(flag)
        n = p.size
        model_total += n
        model_trainable += n if flag else 0
        if policy.in_backbone_scope(name):
            backbone_total += n
            backbone_trainable += n if flag else 0
    return FreezeReport(backbone_total, backbone_trainable, model_total, model_trainable)
