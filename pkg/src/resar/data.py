"""Dataset loading: sweep alignment, voxelization, frozen codec targets and batching."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .codec import GtCodec, level_shapes
from .encoders import VoxelizedRadar, collate_radar, voxelize
from .geometry import BevGridSpec, EgoPose, align_points, camera_tensors
from .model import Batch
from .synthetic import Sample, read_index, read_sample


def aligned_radar(sample: Sample) -> np.ndarray:
    """All sweeps moved into the current reference frame: (M, 6) x, y, z, vx, vy, rcs."""
    table = sample.radar
    out = np.zeros((len(table), 6))
    ref = EgoPose()
    for k, pose in enumerate(sample.ego_poses):
        rows = table[:, 6] == k
        if not rows.any():
            continue
        block = table[rows]
        out[rows, :3] = align_points(block[:, :3], pose, ref)
        vel = np.column_stack([block[:, 3], np.zeros(len(block)), block[:, 4]]) @ pose.rotation.T
        out[rows, 3], out[rows, 4] = vel[:, 0], vel[:, 2]
        out[rows, 5] = block[:, 5]
    return out


@dataclass
class PreparedSample:
    name: str
    images: np.ndarray          # (ncam, 3, H, W) uint8
    voxels: VoxelizedRadar
    K: torch.Tensor
    R: torch.Tensor
    t: torch.Tensor
    gt: torch.Tensor            # (C, Z, X) float 0/1
    condition: str
    targets: list[torch.Tensor] | None = None


def prepare(sample: Sample, grid: BevGridSpec, seed: int, name: str = "") -> PreparedSample:
    K, R, t = camera_tensors(sample.cameras)
    vox = voxelize(aligned_radar(sample), grid, seed)
    return PreparedSample(name, sample.images, vox, K, R, t, torch.as_tensor(sample.gt, dtype=torch.float32),
                          sample.meta.get("condition", "sunny"))


def pyramid_targets(gt: torch.Tensor, levels: int = 4) -> list[torch.Tensor]:
    """Plain multi-resolution targets: average-pooled masks mapped to [-1, 1]."""
    Z, X = gt.shape[-2:]
    out = []
    for h, _ in level_shapes(Z, X, levels):
        f = Z // h
        pooled = F.avg_pool2d(gt[None], f)[0] if f > 1 else gt
        out.append(2.0 * pooled - 1.0)
    return out


def attach_targets(items: list[PreparedSample], codec: GtCodec | None, mode: str = "residual") -> None:
    """Precompute per-stage supervision once; the frozen codec never changes afterwards."""
    for item in items:
        if mode == "pyramid":
            item.targets = pyramid_targets(item.gt)
        elif mode == "residual" and codec is not None:
            with torch.no_grad():
                dec = codec.decompose(item.gt)
            item.targets = [t.float() for t in dec.pyramid.levels]
        else:
            item.targets = None


class SceneDataset:
    """All samples of one split, loaded and voxelized eagerly (desk-scale sets fit in memory)."""

    def __init__(self, root: str | Path, split: str, grid: BevGridSpec, seed: int = 0, limit: int | None = None):
        self.root = Path(root)
        index = read_index(self.root)
        entries = [e for e in index["samples"] if e["split"] == split]
        if limit is not None:
            entries = entries[:limit]
        self.split = split
        self.class_frequency = np.asarray(index["class_frequency"], dtype=np.float64)
        self.items = [prepare(read_sample(self.root / e["path"]), grid, seed + i, e["path"])
                      for i, e in enumerate(entries)]

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i) -> PreparedSample:
        return self.items[i]


def collate(items: list[PreparedSample], with_radar: bool = True) -> Batch:
    images = torch.as_tensor(np.stack([it.images for it in items])).float() / 255.0
    radar = collate_radar([it.voxels for it in items]) if with_radar else None
    targets = None
    if all(it.targets is not None for it in items):
        targets = [torch.stack([it.targets[k] for it in items]) for k in range(len(items[0].targets))]
    return Batch(images, radar, torch.stack([it.K for it in items]), torch.stack([it.R for it in items]),
                 torch.stack([it.t for it in items]), torch.stack([it.gt for it in items]), targets)


def batch_order(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[np.ndarray]:
    """Seed-fixed minibatch index lists for one epoch (last partial batch kept)."""
    idx = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]
