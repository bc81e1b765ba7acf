"""Finite-difference audit targets, one per architectural component.

Each target builds a small instance, seeds any batch-norm running statistics
with one training pass, then checks analytic gradients of a random scalar
projection against central differences over every trainable parameter.
Random projections avoid test functions whose true gradient is degenerate
(e.g. the sum of a normalized output).
"""

from __future__ import annotations

import numpy as np

from .adapter import Adapter, AdapterBoundaryExpert, AdapterConfig, AdapterSpatialExpert
from .experts import BoundaryExpert, ContextExpert, FixedKernelBank, ShapeExpert, SpatialExpert
from .fusion import FusionBlock
from .nn import rng_for
from .routing import MoeLossWeights, RouterConfig, SoftRouter, TopKRouter
from .segmentation import DecodeHead, seg_loss
from .tensor import (
    Parameter,
    Tensor,
    add,
    conv2d_depthwise,
    conv2d_pointwise,
    finite_diff_check,
    layer_norm,
    matmul,
    mul,
    relu,
    sigmoid,
    softmax,
    softplus,
    sqrt_eps,
    tsum,
    upsample_bilinear,
)

__all__ = ["TARGETS"]


def _trainable(module) -> list[Parameter]:
    return [p for p in module.parameters() if p.requires_grad]


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    return tsum(mul(out, Tensor(rng.normal(size=out.shape))))


def check_tensor_ops(h: float) -> float:
    rng = np.random.default_rng(11)
    w = Parameter(rng.normal(size=(6, 4)), "w")
    dw = Parameter(rng.normal(size=(3, 3, 3)), "dw")
    pw = Parameter(rng.normal(size=(3, 3)), "pw")
    scale = Parameter(1.0 + 0.1 * rng.normal(size=4), "s", kind="norm_scale")
    shift = Parameter(0.1 * rng.normal(size=4), "b", kind="norm_shift")
    x = Tensor(rng.normal(size=(2, 5, 6)))
    grid = Tensor(rng.normal(size=(2, 3, 4, 4)))
    proj = Tensor(rng.normal(size=(2, 5, 4)))
    proj2 = Tensor(rng.normal(size=(2, 3, 8, 8)))

    def f():
        tokens = layer_norm(relu(matmul(x, w)), scale, shift)
        a = tsum(mul(softmax(tokens, axis=-1), proj))
        conv = conv2d_pointwise(conv2d_depthwise(grid, dw, padding="replicate"), pw)
        b = tsum(mul(upsample_bilinear(sigmoid(conv), 2), proj2))
        c = tsum(softplus(sqrt_eps(mul(conv, conv), 1e-6)))
        return add(add(a, b), c)

    return finite_diff_check(f, [w, dw, pw, scale, shift], h=h)


def check_adapter_boundary_expert(h: float) -> float:
    rng = np.random.default_rng(12)
    expert = AdapterBoundaryExpert(4, beta=0.1, rng=rng_for(0, "gc.ab"))
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    expert(x, training=True)
    probe = rng.normal(size=(2, 4, 3, 3))

    def f():
        return tsum(mul(expert(x, training=False), Tensor(probe)))

    return finite_diff_check(f, _trainable(expert), h=h)


def check_adapter_spatial_expert(h: float) -> float:
    rng = np.random.default_rng(13)
    expert = AdapterSpatialExpert(4, alpha=0.3, rng=rng_for(0, "gc.as"))
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    expert(x, training=True)
    probe = rng.normal(size=(2, 4, 3, 3))

    def f():
        return tsum(mul(expert(x, training=False), Tensor(probe)))

    return finite_diff_check(f, _trainable(expert), h=h)


def _fusion_expert_checker(expert_cls_name: str, seed: int):
    def run(h: float) -> float:
        rng = np.random.default_rng(seed)
        channels = 4
        bank = FixedKernelBank(channels)
        if expert_cls_name == "spatial":
            expert = SpatialExpert(channels)
            expert.proj_weight.data[:] = rng.normal(size=expert.proj_weight.shape)
            expert.proj_bias.data[:] = 0.1 * rng.normal(size=expert.proj_bias.shape)
        elif expert_cls_name == "context":
            expert = ContextExpert(channels, heads=2, rng=rng_for(0, "gc.ctx"))
            expert.attn.wo.weight.data[:] = rng.normal(size=expert.attn.wo.weight.shape) * 0.2
            expert.ffn_out.weight.data[:] = rng.normal(size=expert.ffn_out.weight.shape) * 0.2
        elif expert_cls_name == "boundary":
            expert = BoundaryExpert(channels, bank)
            expert.fuse.fuse_weight.data[:] = rng.normal(size=expert.fuse.fuse_weight.shape) * 0.2
        else:
            expert = ShapeExpert(channels, bank)
            expert.fuse.fuse_weight.data[:] = rng.normal(size=expert.fuse.fuse_weight.shape) * 0.2
        x = Tensor(rng.normal(size=(2, channels, 3, 3)))
        expert(x, training=True)
        probe = rng.normal(size=(2, channels, 3, 3))

        def f():
            return tsum(mul(expert(x, training=False), Tensor(probe)))

        return finite_diff_check(f, _trainable(expert), h=h)

    return run


def check_soft_router(h: float) -> float:
    rng = np.random.default_rng(14)
    router = SoftRouter(6, rng_for(0, "gc.soft"))
    tokens = Tensor(rng.normal(size=(3, 5, 6)))
    probe = rng.normal(size=(3, 2))

    def f():
        return tsum(mul(router(tokens), Tensor(probe)))

    return finite_diff_check(f, _trainable(router), h=h)


def check_topk_router(h: float) -> float:
    rng = np.random.default_rng(15)
    cfg = RouterConfig(num_experts=4, top_k=2, noise_std=0.0)
    router = TopKRouter(6, cfg, rng_for(0, "gc.topk"))
    x = Tensor(rng.normal(size=(3, 6, 3, 3)))
    probe = rng.normal(size=(3, 4))

    def f():
        decision = router(x, training=False)
        return tsum(mul(decision.weights, Tensor(probe)))

    return finite_diff_check(f, _trainable(router), h=h)


def check_adapter_pipeline(h: float) -> float:
    rng = np.random.default_rng(16)
    cfg = AdapterConfig(backbone_dim=10, adapter_dim=6, prefix_count=2, text_dim=6, heads=2)
    adapter = Adapter(cfg, seed=3, name="gc.adapter")
    adapter.up.weight.data[:] = rng.normal(size=adapter.up.weight.shape) * 0.2
    x = Tensor(rng.normal(size=(2, 2 + 4, 10)))
    text = Tensor(rng.normal(size=(2, 1, 6)))
    adapter(x, text, training=True)
    probe = rng.normal(size=(2, 6, 10))

    def f():
        return tsum(mul(adapter(x, text, training=False), Tensor(probe)))

    return finite_diff_check(f, _trainable(adapter), h=h)


def check_fusion_block(h: float) -> float:
    rng = np.random.default_rng(17)
    block = FusionBlock(
        4,
        RouterConfig(num_experts=4, top_k=2, noise_std=0.0),
        MoeLossWeights(),
        seed=5,
        heads=2,
    )
    for expert in block.experts:
        for p in expert.parameters():
            if p.kind == "weight":
                p.data += rng.normal(size=p.shape) * 0.2
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    block(x, training=True, rng=np.random.default_rng(0))
    probe = rng.normal(size=(2, 4, 3, 3))

    def f():
        y, _, _ = block(x, training=False)
        return tsum(mul(y, Tensor(probe)))

    return finite_diff_check(f, _trainable(block), h=h)


def check_seg_head(h: float) -> float:
    rng = np.random.default_rng(18)
    head = DecodeHead(4, upsample_factor=4, rng=rng_for(0, "gc.head"))
    features = Tensor(rng.normal(size=(2, 4, 3, 3)))
    gt = (rng.uniform(size=(2, 1, 12, 12)) < 0.3).astype(np.float64)

    def f():
        return seg_loss(head(features), gt)

    return finite_diff_check(f, _trainable(head), h=h)


TARGETS = {
    "tensor_ops": check_tensor_ops,
    "adapter_boundary_expert": check_adapter_boundary_expert,
    "adapter_spatial_expert": check_adapter_spatial_expert,
    "fusion_spatial_expert": _fusion_expert_checker("spatial", 21),
    "fusion_context_expert": _fusion_expert_checker("context", 22),
    "fusion_boundary_expert": _fusion_expert_checker("boundary", 23),
    "fusion_shape_expert": _fusion_expert_checker("shape", 24),
    "soft_router": check_soft_router,
    "topk_router": check_topk_router,
    "adapter_pipeline": check_adapter_pipeline,
    "fusion_block": check_fusion_block,
    "seg_head": check_seg_head,
}
