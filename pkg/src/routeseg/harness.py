"""Training loop, evaluation, ablations, transfer evaluation, gradient audit.

Every run is a pure function of (config, seed): dataset order, routing noise,
and parameter initialization all derive from named rng streams, so repeated
runs reproduce each emitted number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import FreezePolicy, apply_freeze_policy
from .data import Dataset, random_mask_baseline, read_dataset
from .model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from .nn import rng_for
from .optim import Adam
from .routing import RoutingStats, routing_stats, write_routing_stats_csv
from .segmentation import MetricAccumulator, seg_loss, total_loss
from .tensor import NonFiniteError, Tape, Tensor, backward

__all__ = [
    "RunConfig",
    "RunReport",
    "TrainingDivergence",
    "train",
    "evaluate_model",
    "evaluate",
    "ablate_components",
    "ablate_topk",
    "cross_dialect_eval",
    "grad_check_all",
]

COMPONENT_CHOICES = ("baseline", "adapter", "adapter_fusion")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class RunConfig:
    train_data: str = ""
    val_data: str = ""
    out_dir: str = "runs/run"
    seed: int = 0
    components: str = "adapter_fusion"
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_milestones: tuple[int, ...] = (20, 27)
    eval_batch_size: int = 32
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.components not in COMPONENT_CHOICES:
            raise ValueError(f"components must be one of {COMPONENT_CHOICES}")

    def resolved_model(self) -> ModelConfig:
        cfg = ModelConfig.from_dict(self.model.to_dict())
        cfg.use_adapters = self.components in ("adapter", "adapter_fusion")
        cfg.use_fusion = self.components == "adapter_fusion"
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model")) if "model" in d else ModelConfig()
        d["lr_milestones"] = tuple(d.get("lr_milestones", (20, 27)))
        return RunConfig(model=model, **d)

    def config_hash(self) -> str:
        # out_dir does not affect the computation; exclude it so replicas of
        # the same run hash identically.
        d = self.to_dict()
        d.pop("out_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    config_hash: str
    seed: int
    components: str
    best_val_miou: float
    best_epoch: int
    final_val_miou: float
    final_val_oiou: float
    train_loss_curve: list[float]
    val_miou_curve: list[float]
    routing_mean_weight: Optional[list[float]]
    routing_selection_freq: Optional[list[float]]
    wall_time_s: float
    trainable_params: int
    total_params: int
    backbone_trainable_fraction: float
    checkpoint_best: str
    checkpoint_last: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _batches(n: int, batch_size: int, order: Optional[np.ndarray] = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def _batch_tensors(ds: Dataset, idx: np.ndarray) -> tuple[Tensor, list[list[int]], np.ndarray]:
    images = Tensor(np.stack([ds.records[i].image for i in idx]))
    expressions = [ds.records[i].expression_ids for i in idx]
    masks = np.stack([ds.records[i].mask for i in idx]).astype(np.float64)[:, None]
    return images, expressions, masks


def evaluate_model(
    model: SegmentationModel,
    ds: Dataset,
    batch_size: int = 32,
) -> tuple[MetricAccumulator, Optional[RoutingStats]]:
    acc = MetricAccumulator()
    decisions = []
    for idx in _batches(len(ds), batch_size):
        images, expressions, masks = _batch_tensors(ds, idx)
        pred, decision, _ = model(images, expressions, training=False)
        binary = pred.binary()
        for j in range(len(idx)):
            acc.add(binary[j, 0], masks[j, 0])
        if decision is not None:
            decisions.append(decision)
    stats = routing_stats(decisions) if decisions else None
    return acc, stats


def train(cfg: RunConfig) -> RunReport:
    t_start = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = read_dataset(cfg.train_data)
    val_ds = read_dataset(cfg.val_data)

    model = SegmentationModel(cfg.resolved_model(), seed=cfg.seed)
    freeze_report = apply_freeze_policy(model, FreezePolicy())
    trainable = [p for p in model.parameters() if p.trainable]
    opt = Adam(trainable, lr=cfg.lr)
    shuffle_rng = rng_for(cfg.seed, "harness.shuffle")
    noise_rng = rng_for(cfg.seed, "harness.routing_noise")

    ckpt_best = str(out / "best.ckpt")
    ckpt_last = str(out / "last.ckpt")
    loss_curve: list[float] = []
    val_curve: list[float] = []
    best_miou = -1.0
    best_epoch = -1
    last_stats: Optional[RoutingStats] = None

    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_milestones:
            opt.lr *= cfg.lr_decay
        order = shuffle_rng.permutation(len(train_ds))
        epoch_losses = []
        for step_idx, idx in enumerate(_batches(len(train_ds), cfg.batch_size, order)):
            images, expressions, masks = _batch_tensors(train_ds, idx)
            try:
                with Tape() as tape:
                    pred, _, aux = model(images, expressions, training=True, rng=noise_rng)
                    loss = total_loss(seg_loss(pred, masks), aux)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"loss is {value!r}")
                backward(loss, tape)
            except NonFiniteError as exc:
                raise TrainingDivergence(
                    f"numeric blow-up at epoch {epoch} step {step_idx}: {exc}; "
                    f"lr={opt.lr:g}, batch indices {idx[:4].tolist()}..."
                ) from exc
            opt.step()
            opt.zero_grad()
            epoch_losses.append(value)
        loss_curve.append(float(np.mean(epoch_losses)))

        acc, stats = evaluate_model(model, val_ds, cfg.eval_batch_size)
        val_curve.append(100.0 * acc.miou)
        last_stats = stats
        if val_curve[-1] > best_miou:
            best_miou = val_curve[-1]
            best_epoch = epoch
            save_checkpoint(model, ckpt_best, extra={"epoch": epoch, "val_miou": val_curve[-1]})

    save_checkpoint(model, ckpt_last, extra={"epoch": cfg.epochs - 1, "val_miou": val_curve[-1]})
    final_acc, final_stats = evaluate_model(model, val_ds, cfg.eval_batch_size)
    if final_stats is not None:
        write_routing_stats_csv(final_stats, out / "routing_stats.csv")

    report = RunReport(
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        components=cfg.components,
        best_val_miou=best_miou,
        best_epoch=best_epoch,
        final_val_miou=100.0 * final_acc.miou,
        final_val_oiou=100.0 * final_acc.oiou,
        train_loss_curve=loss_curve,
        val_miou_curve=val_curve,
        routing_mean_weight=None if final_stats is None else [float(v) for v in final_stats.mean_weight],
        routing_selection_freq=None if final_stats is None else [float(v) for v in final_stats.selection_freq],
        wall_time_s=time.time() - t_start,
        trainable_params=freeze_report.model_trainable,
        total_params=freeze_report.model_total,
        backbone_trainable_fraction=freeze_report.backbone_fraction,
        checkpoint_best=ckpt_best,
        checkpoint_last=ckpt_last,
    )
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return report


def evaluate(
    checkpoint: str,
    data_path: str,
    k_override: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> dict:
    """Eval-mode pass over a dataset; optional Top-K override for mismatch
    experiments (by default inference uses the training-time K)."""
    model, extra = load_checkpoint(checkpoint)
    if k_override is not None and model.fusion is not None:
        router_cfg = dataclasses.replace(model.fusion.router.cfg, top_k=k_override)
        model.fusion.router.cfg = router_cfg
    ds = read_dataset(data_path)
    acc, stats = evaluate_model(model, ds)
    report = acc.report(
        split=f"{ds.config.dialect}/{ds.config.split}",
        per_expert_stats=None
        if stats is None
        else {
            "mean_weight": [float(v) for v in stats.mean_weight],
            "selection_freq": [float(v) for v in stats.selection_freq],
        },
    )
    report["checkpoint"] = checkpoint
    report["checkpoint_extra"] = extra
    report["k_override"] = k_override
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        if stats is not None:
            write_routing_stats_csv(stats, out / "routing_stats.csv")
    return report


# --------------------------------------------------------------------------
# Ablations
# --------------------------------------------------------------------------

def _run_variant(base: RunConfig, name: str, seed: int, **overrides) -> RunReport:
    d = base.to_dict()
    d["seed"] = seed
    d["out_dir"] = str(Path(base.out_dir) / f"{name}_seed{seed}")
    cfg = RunConfig.from_dict(d)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return train(cfg)


def ablate_components(base: RunConfig, seeds: Sequence[int] = (0, 1, 2)) -> list[dict]:
    """Baseline / +adapter / +adapter+fusion, median metrics over seeds."""
    rows = []
    for name in COMPONENT_CHOICES:
        reports = [_run_variant(base, f"components_{name}", s, components=name) for s in seeds]
        rows.append(
            {
                "components": name,
                "median_miou": statistics.median(r.final_val_miou for r in reports),
                "median_oiou": statistics.median(r.final_val_oiou for r in reports),
                "config_hash": reports[0].config_hash,
                "seeds": list(seeds),
            }
        )
    base_miou = rows[0]["median_miou"]
    for row in rows:
        row["delta_vs_baseline"] = row["median_miou"] - base_miou
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_components.csv", "w") as fh:
        fh.write("components,median_miou,median_oiou,delta_vs_baseline,config_hash\n")
        for row in rows:
            fh.write(
                f"{row['components']},{row['median_miou']:.4f},{row['median_oiou']:.4f},"
                f"{row['delta_vs_baseline']:.4f},{row['config_hash']}\n"
            )
    return rows


def ablate_topk(
    base: RunConfig,
    k_set: Sequence[int] = (1, 2, 3, 4),
    seeds: Sequence[int] = (0, 1, 2),
) -> list[dict]:
    """Train and evaluate with the same K at both stages, per K in k_set."""
    rows = []
    for k in k_set:
        reports = []
        for s in seeds:
            d = base.to_dict()
            d["model"]["router"]["top_k"] = k
            d["seed"] = s
            d["out_dir"] = str(Path(base.out_dir) / f"topk{k}_seed{s}")
            reports.append(train(RunConfig.from_dict(d)))
        rows.append(
            {
                "K": k,
                "median_miou": statistics.median(r.final_val_miou for r in reports),
                "median_oiou": statistics.median(r.final_val_oiou for r in reports),
                "config_hash": reports[0].config_hash,
            }
        )
    k1 = {row["K"]: row for row in rows}.get(1)
    for row in rows:
        row["delta_miou_vs_k1"] = row["median_miou"] - k1["median_miou"] if k1 else float("nan")
        row["delta_oiou_vs_k1"] = row["median_oiou"] - k1["median_oiou"] if k1 else float("nan")
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_topk.csv", "w") as fh:
        fh.write("K,median_miou,median_oiou,delta_miou_vs_k1,delta_oiou_vs_k1,config_hash\n")
        for row in rows:
            fh.write(
                f"{row['K']},{row['median_miou']:.4f},{row['median_oiou']:.4f},"
                f"{row['delta_miou_vs_k1']:.4f},{row['delta_oiou_vs_k1']:.4f},{row['config_hash']}\n"
            )
    return rows


def cross_dialect_eval(checkpoint: str, data_paths: dict[str, str], out_dir: Optional[str] = None) -> dict:
    """Zero-shot transfer: evaluate one checkpoint on other dialects' data.

    Each target also reports the random-single-object-mask oracle baseline.
    """
    table = {}
    for dialect, path in sorted(data_paths.items()):
        ds = read_dataset(path)
        model, _ = load_checkpoint(checkpoint)
        acc, _ = evaluate_model(model, ds)
        table[dialect] = {
            "mIoU": 100.0 * acc.miou,
            "oIoU": 100.0 * acc.oiou,
            "random_mask_baseline_miou": random_mask_baseline(ds),
            "n_samples": acc.n,
        }
    result = {"checkpoint": checkpoint, "transfer": table}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cross_dialect.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


# --------------------------------------------------------------------------
# Gradient audit
# --------------------------------------------------------------------------

def grad_check_all(components: Optional[Sequence[str]] = None, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference audit of every differentiable component.

    Small shapes, noise disabled, batch norms in eval statistics. Returns the
    max relative error per component.
    """
    from . import gradcheck_targets

    available = gradcheck_targets.TARGETS
    names = list(available) if components is None else list(components)
    results = {}
    for name in names:
        if name not in available:
            raise KeyError(f"unknown grad-check component {name!r}")
        results[name] = available[name](h)
    return results
