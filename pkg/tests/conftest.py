import json

import numpy as np
import pytest

from routeseg.data import DatasetConfig, generate_dataset, write_dataset
from routeseg.harness import RunConfig
from routeseg.model import ModelConfig


def tiny_model_dict() -> dict:
    cfg = ModelConfig()
    d = cfg.to_dict()
    d["backbone"].update(
        image_size=32,
        patch_size=8,
        depth=2,
        dim=16,
        heads=2,
        register_count=1,
        adapter_blocks=[1],
        text_dim=16,
        text_max_len=16,
    )
    d["adapter"].update(adapter_dim=8, heads=2)
    d["router"]["hidden_dim"] = 8
    return d


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Two tiny dataset splits at 32x32 shared by the harness tests."""
    root = tmp_path_factory.mktemp("tinydata")
    paths = {}
    for dialect in ("spatial", "appearance"):
        for split, size in (("train", 24), ("val", 12)):
            cfg = DatasetConfig(dialect=dialect, split=split, size=size, image_size=32, seed=1)
            ds = generate_dataset(cfg)
            path = root / f"{dialect}_{split}"
            write_dataset(ds, path)
            paths[f"{dialect}_{split}"] = str(path)
    return paths


@pytest.fixture()
def tiny_run_config(tiny_data, tmp_path):
    def make(**overrides) -> RunConfig:
        d = {
            "train_data": tiny_data["spatial_train"],
            "val_data": tiny_data["spatial_val"],
            "out_dir": str(tmp_path / "run"),
            "seed": 0,
            "epochs": 2,
            "batch_size": 8,
            "lr": 1e-3,
            "lr_milestones": [],
            "model": tiny_model_dict(),
        }
        d.update(overrides)
        return RunConfig.from_dict(d)

    return make
