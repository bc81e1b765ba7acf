"""Model assembly (encoders + optional fusion + decode head) and checkpoints.

Checkpoints are a single file: magic, a JSON manifest (config, parameter
names/shapes/kinds/offsets, payload checksum), then a raw little-endian
float64 payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adapter import AdapterConfig
from .backbone import BackboneConfig, FreezePolicy, TextEncoder, VisionEncoder, apply_freeze_policy
from .fusion import FusionBlock
from .nn import Module, rng_for
from .routing import MoeLossWeights, RouterConfig, RoutingDecision
from .segmentation import DecodeHead, MaskPrediction
from .tensor import ShapeError, StateError, Tensor

__all__ = ["ModelConfig", "SegmentationModel", "save_checkpoint", "load_checkpoint", "CheckpointError"]

CHECKPOINT_MAGIC = b"RSEGCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    adapter: AdapterConfig = dataclasses.field(default_factory=AdapterConfig)
    router: RouterConfig = dataclasses.field(default_factory=RouterConfig)
    moe: MoeLossWeights = dataclasses.field(default_factory=MoeLossWeights)
    use_adapters: bool = True
    use_fusion: bool = True
    router_bias_init: tuple[float, ...] = ()  # optional skew for collapse studies

    def __post_init__(self):
        # Keep the nested widths consistent without repeating them in configs.
        self.adapter.backbone_dim = self.backbone.dim
        self.adapter.text_dim = self.backbone.text_dim
        self.adapter.prefix_count = self.backbone.prefix_count

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            backbone=BackboneConfig(**{**d["backbone"], "adapter_blocks": tuple(d["backbone"]["adapter_blocks"])}),
            adapter=AdapterConfig(**d["adapter"]),
            router=RouterConfig(**d["router"]),
            moe=MoeLossWeights(**d["moe"]),
            use_adapters=d["use_adapters"],
            use_fusion=d["use_fusion"],
            router_bias_init=tuple(d.get("router_bias_init", ())),
        )


class SegmentationModel(Module):
    """Backbone tokens -> spatial grid -> optional fusion refinement -> mask."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.init_seed = seed
        bb = cfg.backbone
        self.visual = VisionEncoder(bb, cfg.adapter if cfg.use_adapters else None, seed)
        self.text = TextEncoder(bb, seed)
        self.fusion = (
            FusionBlock(bb.dim, cfg.router, cfg.moe, seed, heads=bb.heads)
            if cfg.use_fusion
            else None
        )
        if cfg.use_fusion and cfg.router_bias_init:
            bias = np.asarray(cfg.router_bias_init, dtype=np.float64)
            if bias.shape != (cfg.router.num_experts,):
                raise ShapeError("router_bias_init length must equal the expert count")
            self.fusion.router.fc2.bias.data[:] = bias
        self.head = DecodeHead(bb.dim, bb.patch_size, rng_for(seed, "head"))
        self.finalize_names()

    def spatial_grid(self, tokens: Tensor) -> Tensor:
        from .experts import tokens_to_grid
        from .tensor import crop

        bb = self.cfg.backbone
        spatial = crop(tokens, (slice(None), slice(bb.prefix_count, bb.token_count), slice(None)))
        return tokens_to_grid(spatial, bb.grid_side, bb.grid_side)

    def __call__(
        self,
        images: Tensor,
        expressions: list[list[int]],
        training: bool,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[MaskPrediction, Optional[RoutingDecision], Tensor]:
        text = self.text(expressions, training) if self.cfg.use_adapters else None
        tokens = self.visual(images, text, training)
        grid = self.spatial_grid(tokens)
        decision = None
        aux = Tensor(0.0)
        if self.fusion is not None:
            grid, decision, aux = self.fusion(grid, training, rng)
        return self.head(grid), decision, aux


# --------------------------------------------------------------------------
# Checkpoint I/O
# --------------------------------------------------------------------------

def save_checkpoint(model: SegmentationModel, path, extra: Optional[dict] = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(p.shape),
                "kind": p.kind,
                "trainable": p.trainable,
                "offset": offset,
                "nbytes": len(raw),
                "role": "parameter",
            }
        )
        blobs.append(raw)
        offset += len(raw)
    for name, buf in model.named_buffers():
        raw = np.ascontiguousarray(buf, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(buf.shape),
                "kind": "buffer",
                "trainable": False,
                "offset": offset,
                "nbytes": len(raw),
                "role": "buffer",
            }
        )
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "init_seed": model.init_seed,
        "entries": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    raw_manifest = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw_manifest)))
        fh.write(raw_manifest)
        fh.write(payload)


def load_checkpoint(path) -> tuple[SegmentationModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (manifest_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        payload = fh.read()
    if manifest["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest['version']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch (corrupt or truncated file)")
    cfg = ModelConfig.from_dict(manifest["config"])
    model = SegmentationModel(cfg, seed=manifest["init_seed"])
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for entry in manifest["entries"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        if entry["role"] == "parameter":
            target = params.get(entry["name"])
            if target is None:
                raise CheckpointError(f"checkpoint parameter {entry['name']!r} missing from model")
            if tuple(entry["shape"]) != target.shape:
                raise ShapeError(
                    f"{entry['name']}: checkpoint shape {entry['shape']} vs model {target.shape}"
                )
            target.data[...] = arr
            target.set_trainable(entry["trainable"]) if target.kind != "fixed_kernel" else None
        else:
            target_buf = buffers.get(entry["name"])
            if target_buf is None:
                raise CheckpointError(f"checkpoint buffer {entry['name']!r} missing from model")
            target_buf[...] = arr
    return model, manifest["extra"]
