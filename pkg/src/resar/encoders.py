"""Camera backbone and radar voxel feature encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError
from .geometry import BevGridSpec

POINT_FEATURES = ("x", "y", "z", "vx", "vy", "rcs")


class ImageBackbone(nn.Module):
    """Small strided conv stack emitting D-channel maps at 1/4, 1/8 and 1/16 of the input."""

    def __init__(self, dim: int = 32, channels=(16, 32, 48, 64)):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.block8 = nn.Sequential(
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.block16 = nn.Sequential(
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(inplace=True),
        )
        # 1x1 channel compression so every scale carries D channels
        self.lateral = nn.ModuleList([nn.Conv2d(c, dim, 1) for c in (c1, c2, c3)])
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    strides = (4, 8, 16)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """images: (B, ncam, 3, H, W) in [0, 1] -> three tensors (B, ncam, D, H/s, W/s)."""
        B, N, _, H, W = images.shape
        if H % 16 or W % 16:
            raise ConfigError(f"image size {(H, W)} must be divisible by 16")
        x = images.reshape(B * N, 3, H, W)
        f4 = self.stem(x)
        f8 = self.block8(f4)
        f16 = self.block16(f8)
        outs = []
        for lat, f in zip(self.lateral, (f4, f8, f16)):
            y = lat(f)
            outs.append(y.reshape(B, N, *y.shape[1:]))
        return outs


@dataclass
class VoxelizedRadar:
    coords: np.ndarray      # (V, 3) int64 voxel indices (iz, iy, ix)
    points: np.ndarray      # (V, cap, 6) float32, padded rows are zero
    mask: np.ndarray        # (V, cap) bool
    n_out_of_grid: int = 0

    @property
    def num_voxels(self) -> int:
        return int(self.coords.shape[0])


def voxel_indices(points: np.ndarray, grid: BevGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Integer (iz, iy, ix) per point and an in-grid mask."""
    y0 = grid.y_extent_m[0]
    ix = np.floor((points[:, 0] - grid.x_extent_m[0]) / grid.x_res).astype(np.int64)
    iy = np.floor((points[:, 1] - y0) / grid.y_res_m).astype(np.int64)
    iz = np.floor((points[:, 2] - grid.z_extent_m[0]) / grid.z_res).astype(np.int64)
    inside = ((ix >= 0) & (ix < grid.x_cells) & (iy >= 0) & (iy < grid.y_cells)
              & (iz >= 0) & (iz < grid.z_cells))
    return np.stack([iz, iy, ix], axis=1), inside


def voxelize(points: np.ndarray, grid: BevGridSpec, seed: int, max_points: int = 10) -> VoxelizedRadar:
    """Bucket (M, 6) reference-frame points into voxels holding at most ``max_points`` each.

    Over-full voxels keep a seeded uniform random subset; the rest are zero-padded.
    Points outside the grid are dropped and counted.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, len(POINT_FEATURES))
    idx, inside = voxel_indices(points, grid)
    n_out = int((~inside).sum())
    points, idx = points[inside], idx[inside]
    lin = (idx[:, 0] * grid.y_cells + idx[:, 1]) * grid.x_cells + idx[:, 2]
    order = np.argsort(lin, kind="stable")
    lin, points, idx = lin[order], points[order], idx[order]
    uniq, starts, counts = np.unique(lin, return_index=True, return_counts=True)
    V = len(uniq)
    out_pts = np.zeros((V, max_points, len(POINT_FEATURES)), dtype=np.float32)
    out_mask = np.zeros((V, max_points), dtype=bool)
    rng = np.random.default_rng(seed)
    for v, (s, n) in enumerate(zip(starts, counts)):
        rows = np.arange(s, s + n)
        if n > max_points:
            rows = np.sort(rng.choice(rows, size=max_points, replace=False))
        out_pts[v, : len(rows)] = points[rows]
        out_mask[v, : len(rows)] = True
    coords = idx[starts] if V else np.zeros((0, 3), dtype=np.int64)
    return VoxelizedRadar(coords.astype(np.int64), out_pts, out_mask, n_out)


@dataclass
class RadarBatch:
    coords: torch.Tensor    # (V, 4) long: batch, iz, iy, ix
    points: torch.Tensor    # (V, R, 6)
    mask: torch.Tensor      # (V, R) bool
    batch_size: int

    def to(self, dtype=None, device=None) -> "RadarBatch":
        return RadarBatch(self.coords.to(device), self.points.to(device=device, dtype=dtype),
                          self.mask.to(device), self.batch_size)


def collate_radar(items: list[VoxelizedRadar], dtype=torch.float32) -> RadarBatch:
    coords, pts, masks = [], [], []
    for b, vox in enumerate(items):
        c = torch.as_tensor(vox.coords, dtype=torch.long).reshape(-1, 3)
        coords.append(torch.cat([torch.full((c.shape[0], 1), b, dtype=torch.long), c], dim=1))
        pts.append(torch.as_tensor(vox.points, dtype=dtype))
        masks.append(torch.as_tensor(vox.mask))
    cap = max((p.shape[1] for p in pts), default=10)
    pts = [F.pad(p, (0, 0, 0, cap - p.shape[1])) for p in pts]
    masks = [F.pad(m, (0, cap - m.shape[1])) for m in masks]
    return RadarBatch(torch.cat(coords), torch.cat(pts), torch.cat(masks), len(items))


class VFEBlock(nn.Module):
    """Point-wise projection + dual-path (max / attention) pooling + MLP compression."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim)
        self.score = nn.Linear(dim, 1, bias=False)      # a bias cancels in the softmax
        self.mlp = nn.Sequential(nn.Linear(3 * dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        for m in self.modules():
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, return_pooled: bool = False):
        """x: (V, R, in_dim), mask: (V, R) -> (V, R, dim); invalid rows are zero."""
        m = mask[..., None]
        p = F.relu(self.proj(x))
        any_valid = mask.any(dim=1, keepdim=True)
        neg_inf = torch.finfo(p.dtype).min
        p_max = torch.where(m, p, torch.full_like(p, neg_inf)).amax(dim=1)
        p_max = torch.where(any_valid, p_max, torch.zeros_like(p_max))
        s = self.score(p).squeeze(-1)
        # empty voxels: uniform logits, then zeroed weights (avoids NaN from an all -inf softmax)
        s = torch.where(mask, s, torch.full_like(s, float("-inf")))
        s = torch.where(any_valid, s, torch.zeros_like(s))
        w = torch.softmax(s, dim=1) * mask.to(s.dtype)
        p_attn = (w[..., None] * p).sum(dim=1)
        R = x.shape[1]
        cat = torch.cat([p, p_max[:, None].expand(-1, R, -1), p_attn[:, None].expand(-1, R, -1)], dim=-1)
        out = self.mlp(cat) * m.to(p.dtype)
        if return_pooled:
            return out, p_max, p_attn
        return out


def canonicalize_voxels(points: torch.Tensor, mask: torch.Tensor, max_points: int):
    """Order rows of every voxel canonically (valid rows first, lexicographic by feature).

    Makes the encoder an exact function of the point *set*: any row permutation
    or extra padded rows yield bit-identical tensors.
    """
    points = points * mask[..., None].to(points.dtype)
    order = torch.arange(points.shape[1]).expand(points.shape[:2])
    for col in reversed(range(points.shape[-1])):
        keys = torch.gather(points[..., col], 1, order)
        _, perm = torch.sort(keys, dim=1, stable=True)
        order = torch.gather(order, 1, perm)
    valid_sorted = torch.gather(mask, 1, order)
    _, perm = torch.sort((~valid_sorted).to(torch.int8), dim=1, stable=True)
    order = torch.gather(order, 1, perm)
    points = torch.gather(points, 1, order[..., None].expand(-1, -1, points.shape[-1]))
    mask = torch.gather(mask, 1, order)
    R = points.shape[1]
    if R > max_points:
        if mask[:, max_points:].any():
            raise ValueError(f"voxel holds more than {max_points} valid points")
        points, mask = points[:, :max_points], mask[:, :max_points]
    elif R < max_points:
        points = F.pad(points, (0, 0, 0, max_points - R))
        mask = F.pad(mask, (0, max_points - R))
    return points, mask


class RadarEncoder(nn.Module):
    """Two cascaded VFE blocks, voxel-wise max pooling, scatter to a dense D×Z×Y×X grid."""

    def __init__(self, grid: BevGridSpec, dim: int = 32, max_points: int = 10):
        super().__init__()
        self.grid = grid
        self.dim = dim
        self.max_points = max_points
        self.vfe1 = VFEBlock(len(POINT_FEATURES), dim)
        self.vfe2 = VFEBlock(dim, dim)
        half = grid.max_range()
        # fixed input scaling so metric coordinates, velocities and rcs share a range
        self.register_buffer("input_scale", torch.tensor([1 / half, 1 / 1.5, 1 / half, 0.1, 0.1, 0.05]))

    def voxel_features(self, points: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        points, mask = canonicalize_voxels(points, mask, self.max_points)
        h = self.vfe1(points * self.input_scale.to(points.dtype), mask)
        h = self.vfe2(h, mask)
        neg_inf = torch.finfo(h.dtype).min
        feat = torch.where(mask[..., None], h, torch.full_like(h, neg_inf)).amax(dim=1)
        return torch.where(mask.any(dim=1, keepdim=True), feat, torch.zeros_like(feat))

    def forward(self, radar: RadarBatch) -> torch.Tensor:
        g = self.grid
        Z, Y, X = g.z_cells, g.y_cells, g.x_cells
        dtype = self.input_scale.dtype if radar.points.numel() == 0 else radar.points.dtype
        dense = torch.zeros(radar.batch_size * Z * Y * X, self.dim, dtype=dtype, device=radar.points.device)
        if radar.coords.shape[0]:
            feat = self.voxel_features(radar.points, radar.mask)
            b, iz, iy, ix = radar.coords.unbind(1)
            lin = ((b * Z + iz) * Y + iy) * X + ix
            dense = dense.index_copy(0, lin, feat)
        return dense.view(radar.batch_size, Z, Y, X, self.dim).permute(0, 4, 1, 2, 3)
