import numpy as np
import pytest
import torch

from resar.config import SceneConfig
from resar.synthetic import SceneSpec, sample_seed, scene_masks


def synthetic_masks(count: int, seed: int = 0) -> torch.Tensor:
    cfg = SceneConfig()
    masks = [scene_masks(SceneSpec.from_config(cfg, sample_seed(seed, i))) for i in range(count)]
    return torch.as_tensor(np.stack(masks), dtype=torch.float32)


@pytest.fixture(scope="session")
def mask_bank():
    """64 ground-truth masks of generated scenes (no sensor rendering)."""
    return synthetic_masks(64)


TINY = {
    "grid.x_extent_m": (-8.0, 8.0), "grid.z_extent_m": (-8.0, 8.0), "grid.x_cells": 32, "grid.z_cells": 32,
    "scene.n_cameras": 2, "scene.image_size": (64, 96), "encoder.embed_dim": 16, "raf.decoder_depth": 1,
    "train.batch_size": 2, "train.steps": 3, "train.eval_every": 2, "train.log_every": 1, "codec.steps": 4,
    "codec.batch_size": 2,
}


def tiny_config(**overrides):
    from resar.config import RunConfig

    return RunConfig().replace(**{**TINY, **overrides})


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Four train and two val samples on a 32x32 grid seen by two small cameras."""
    from resar.synthetic import generate_dataset

    cfg = tiny_config()
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(root, 6, 0, cfg.scene, cfg.grid, val_count=2)
    return root
