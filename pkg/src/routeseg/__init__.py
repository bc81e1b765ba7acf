"""routeseg: mixture-of-experts refinement for referring image segmentation.

A self-contained float64 autodiff core, adapter- and fusion-level expert
modules with soft and sparse Top-K routing, a frozen-backbone training
regime, a synthetic referring-segmentation benchmark, and a training/analysis
harness with gradient verification.
"""

__version__ = "0.1.0"

from .tensor import Parameter, Tape, Tensor, backward, finite_diff_check
from .routing import MoeLossWeights, RouterConfig, RoutingDecision
from .model import ModelConfig, SegmentationModel, load_checkpoint, save_checkpoint
from .backbone import BackboneConfig, FreezePolicy, apply_freeze_policy
from .adapter import AdapterConfig
from .data import Dataset, DatasetConfig, generate_dataset, read_dataset, write_dataset
from .harness import RunConfig, evaluate, train

__all__ = [
    "__version__",
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "finite_diff_check",
    "RouterConfig",
    "RoutingDecision",
    "MoeLossWeights",
    "ModelConfig",
    "SegmentationModel",
    "save_checkpoint",
    "load_checkpoint",
    "BackboneConfig",
    "FreezePolicy",
    "apply_freeze_policy",
    "AdapterConfig",
    "DatasetConfig",
    "Dataset",
    "generate_dataset",
    "read_dataset",
    "write_dataset",
    "RunConfig",
    "train",
    "evaluate",
]
