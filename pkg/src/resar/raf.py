"""Residual auto-regressive fusion: one coarse drive stage and three residual modify stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import BevDeformableSelfAttention, DeformableCrossAttention, select_views
from .codec import up
from .config import ConfigError, RafConfig
from .geometry import BevGridSpec

STAGES = 4
STAGE_FACTORS = (8, 4, 2, 1)


class CompressNet(nn.Module):
    """D×Z×Y×X voxel grid -> D×Z×X: strided conv shrinks Y fivefold, then channels fold back to D."""

    def __init__(self, dim: int, y_cells: int):
        super().__init__()
        if y_cells % 5:
            raise ConfigError(f"y_cells={y_cells} must be divisible by 5")
        self.dim, self.y_out = dim, y_cells // 5
        self.reduce = nn.Conv3d(dim, dim, kernel_size=(1, 5, 1), stride=(1, 5, 1))
        self.proj = nn.Conv2d(dim * self.y_out, dim, 1)
        nn.init.zeros_(self.reduce.bias)
        nn.init.zeros_(self.proj.bias)

    def forward(self, f_vox: torch.Tensor) -> torch.Tensor:
        B, D, Z, Y, X = f_vox.shape
        if Y % 5:
            raise ConfigError(f"voxel height {Y} must be divisible by 5")
        y = F.relu(self.reduce(f_vox))
        y = y.permute(0, 1, 3, 2, 4).reshape(B, D * (Y // 5), Z, X)
        return self.proj(y)


class HeightOffset(nn.Module):
    """Per-(camera, layer) ground-proximity heights with a sigmoid-bounded learnable drift."""

    def __init__(self, n_cameras: int, ground_y: float, layer_heights_m=(0.0, 0.5, 1.0),
                 offset_range_m=(-0.6, 0.6), learnable: bool = True):
        super().__init__()
        lo, hi = offset_range_m
        if not lo < hi:
            raise ConfigError("offset range must satisfy min < max")
        self.ofst_min, self.ofst_max = float(lo), float(hi)
        # y points down, so a layer h metres above the ground sits at ground_y - h
        priors = torch.tensor([ground_y - h for h in layer_heights_m]).repeat(n_cameras, 1)
        self.register_buffer("y_gr", priors)
        self.drift_logit = nn.Parameter(torch.zeros(n_cameras, len(layer_heights_m)), requires_grad=learnable)

    @property
    def drift(self) -> torch.Tensor:
        return torch.sigmoid(self.drift_logit)

    def heights(self) -> torch.Tensor:
        """(ncam, layers) adjusted heights in the reference frame."""
        return self.y_gr + self.ofst_min + self.drift * (self.ofst_max - self.ofst_min)

    def reference_points(self, xz: torch.Tensor) -> torch.Tensor:
        """xz: (h, w, 2) cell centers -> (ncam, layers, h, w, 3) 3-D reference points."""
        hts = self.heights().to(xz.dtype)
        ncam, nl = hts.shape
        h, w, _ = xz.shape
        x = xz[..., 0].expand(ncam, nl, h, w)
        z = xz[..., 1].expand(ncam, nl, h, w)
        y = hts[:, :, None, None].expand(ncam, nl, h, w)
        return torch.stack([x, y, z], -1)


def project_per_camera(points: torch.Tensor, K, R, t, image_size, eps: float = 1e-6):
    """points: (ncam, N, 3) (one point set per camera); K, R: (B, ncam, 3, 3); t: (B, ncam, 3)."""
    cam = torch.einsum("bcij,cnj->bcni", R, points) + t[:, :, None, :]
    depth = cam[..., 2]
    ok = depth > eps
    safe = torch.where(ok, depth, torch.ones_like(depth))
    pix = torch.einsum("bcij,bcnj->bcni", K, cam)
    uv = pix[..., :2] / safe[..., None]
    H, W = image_size
    valid = ok & (uv[..., 0] >= 0) & (uv[..., 0] < W) & (uv[..., 1] >= 0) & (uv[..., 1] < H)
    uv = torch.where(valid[..., None], uv, torch.full_like(uv, -1.0))
    return uv, valid


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class DecoderLayer(nn.Module):
    """Self-attention over BEV tokens, deformable cross-attention into images, feed-forward."""

    def __init__(self, self_attn, cross_attn, ffn, norms):
        super().__init__()
        self.self_attn, self.cross_attn, self.ffn = self_attn, cross_attn, ffn
        self.norm1, self.norm2, self.norm3 = norms

    def forward(self, q, uv, cam_idx, valid, features, image_size):
        B, NL, h, w, D = q.shape
        q = self.norm1(q + self.self_attn(q))
        x = q.reshape(B, NL * h * w, D)
        x = self.norm2(x + self.cross_attn(x, uv, cam_idx, valid, features, image_size))
        x = self.norm3(x + self.ffn(x))
        return x.view(B, NL, h, w, D)


def _norms(dim):
    return nn.ModuleList([nn.LayerNorm(dim) for _ in range(3)])


@dataclass
class RafOutputs:
    residuals: list[torch.Tensor]           # f'_bev_1..4 at Z/8, Z/4, Z/2, Z
    acc: torch.Tensor                       # accumulated D×Z×X feature
    stage_inputs: list[torch.Tensor]        # f_bev0 (drive) and Down(acc) for modify stages
    f_bev_init: torch.Tensor | None
    g_res: torch.Tensor                     # (3, D) gate activations actually used
    g_vox: torch.Tensor                     # (3, D)
    extras: dict = field(default_factory=dict)


class RafModule(nn.Module):
    def __init__(self, grid: BevGridSpec, cfg: RafConfig, dim: int, n_cameras: int, *,
                 camera_only: bool = False, use_gates: bool = True, learnable_height: bool = True,
                 residual: bool = True):
        super().__init__()
        self.grid, self.cfg, self.dim = grid, cfg, dim
        self.camera_only, self.use_gates, self.residual = camera_only, use_gates, residual
        Z, X = grid.shape
        nl = len(cfg.height_layers_m)
        if camera_only:
            self.q_init = nn.Parameter(torch.randn(1, dim, Z // 8, X // 8) * 0.1)
        else:
            self.compress = CompressNet(dim, grid.y_cells)
            self.drive_down = nn.Conv2d(dim, dim, 8, stride=8)
            nn.init.zeros_(self.drive_down.bias)
        self.height = HeightOffset(n_cameras, grid.y_prior_m, cfg.height_layers_m, cfg.offset_range_m,
                                   learnable=learnable_height)
        self.height_embed = nn.Parameter(torch.zeros(STAGES, nl, dim))
        self.height_compress = nn.ModuleList([nn.Conv2d(nl * dim, dim, 1) for _ in range(STAGES)])
        for conv in self.height_compress:
            nn.init.zeros_(conv.bias)

        def cross(points):
            return DeformableCrossAttention(dim, cfg.heads, levels=3, points=points)

        depth = cfg.decoder_depth
        self.driver = nn.ModuleList([
            DecoderLayer(BevDeformableSelfAttention(dim, cfg.heads, cfg.self_points), cross(cfg.driver_points),
                         FeedForward(dim, cfg.ffn_dim), _norms(dim))
            for _ in range(depth)
        ])
        # modifier stages: private cross-attention per level, everything else shared
        self.mod_self_attn = nn.ModuleList([BevDeformableSelfAttention(dim, cfg.heads, cfg.self_points)
                                            for _ in range(depth)])
        self.mod_ffn = nn.ModuleList([FeedForward(dim, cfg.ffn_dim) for _ in range(depth)])
        self.mod_norms = nn.ModuleList([_norms(dim) for _ in range(depth)])
        self.modifiers = nn.ModuleList([
            nn.ModuleList([
                DecoderLayer(self.mod_self_attn[k], cross(points), self.mod_ffn[k], self.mod_norms[k])
                for k in range(depth)
            ])
            for points in cfg.modifier_points
        ])
        self.g_res_logit = nn.Parameter(torch.zeros(STAGES - 1, dim))
        self.g_vox_logit = nn.Parameter(torch.zeros(STAGES - 1, dim))
        self.pos_enc = nn.Parameter(torch.zeros(1, 1, Z, X))
        self.acc_down = nn.ModuleList()
        for f in STAGE_FACTORS[1:]:
            conv = nn.Conv2d(dim, dim, f, stride=f, bias=False)
            with torch.no_grad():
                # starts as plain average pooling
                conv.weight.zero_()
                for c in range(dim):
                    conv.weight[c, c] = 1.0 / (f * f)
            self.acc_down.append(conv)
        # full-resolution cell centers; coarser stages pool these
        zz, xx = grid.cell_centers()
        self.register_buffer("xz_full", torch.tensor(np.stack([xx, zz], -1), dtype=torch.float32))

    # -- helpers ---------------------------------------------------------------
    def gates(self) -> tuple[torch.Tensor, torch.Tensor]:
        if not self.use_gates:
            ones = torch.ones_like(self.g_res_logit)
            return ones, ones
        return torch.sigmoid(self.g_res_logit), torch.sigmoid(self.g_vox_logit)

    def stage_layers(self, stage: int):
        return self.driver if stage == 0 else self.modifiers[stage - 1]

    def stage_xz(self, factor: int, dtype) -> torch.Tensor:
        xz = self.xz_full.to(dtype)
        if factor == 1:
            return xz
        # sampling coordinates live at full resolution; coarser grids interpolate (pool) them
        pooled = F.avg_pool2d(xz.permute(2, 0, 1)[None], factor)[0]
        return pooled.permute(1, 2, 0)

    def run_stage(self, x: torch.Tensor, stage: int, features, cams, image_size) -> torch.Tensor:
        B, D, h, w = x.shape
        factor = self.grid.shape[0] // h
        K, R, t = cams
        q = x.permute(0, 2, 3, 1)[:, None] + self.height_embed[stage][None, :, None, None, :]
        refs = self.height.reference_points(self.stage_xz(factor, x.dtype))
        ncam, nl = refs.shape[:2]
        uv, valid = project_per_camera(refs.reshape(ncam, -1, 3), K.to(x.dtype), R.to(x.dtype), t.to(x.dtype),
                                       image_size)
        uv, cam_idx, valid = select_views(uv, valid, self.cfg.max_views)
        for layer in self.stage_layers(stage):
            q = layer(q, uv, cam_idx, valid, features, image_size)
        q = q.permute(0, 1, 4, 2, 3).reshape(B, nl * D, h, w)
        return self.height_compress[stage](q)

    def voxel_at(self, f_init, factor):
        return f_init if factor == 1 else F.avg_pool2d(f_init, factor)

    # -- forward ---------------------------------------------------------------
    def forward(self, f_vox, features, cams, image_size) -> RafOutputs:
        """f_vox: (B, D, Z, Y, X) or None (camera-only); features: 3 image scales; cams: (K, R, t)."""
        Z, X = self.grid.shape
        B = features[0].shape[0]
        g_res, g_vox = self.gates()
        if self.camera_only:
            f_init = None
            f_bev0 = self.q_init.expand(B, -1, -1, -1)
        else:
            f_init = self.compress(f_vox)
            f_bev0 = self.drive_down(f_init)
        residuals = [self.run_stage(f_bev0, 0, features, cams, image_size)]
        inputs = [f_bev0]
        acc = self._accumulate(None, residuals[0], 0, g_res)
        for stage in range(1, STAGES):
            factor = STAGE_FACTORS[stage]
            x = self.acc_down[stage - 1](acc)
            inputs.append(x)
            if f_init is not None:
                x = x + g_vox[stage - 1][None, :, None, None] * self.voxel_at(f_init, factor)
            x = x + (self.pos_enc if factor == 1 else F.avg_pool2d(self.pos_enc, factor))
            residuals.append(self.run_stage(x, stage, features, cams, image_size))
            acc = self._accumulate(acc, residuals[-1], stage, g_res)
        return RafOutputs(residuals, acc, inputs, f_init, g_res, g_vox)

    def _accumulate(self, acc, f_res, stage, g_res):
        Z, X = self.grid.shape
        if not self.residual:
            return up(f_res, (Z, X))
        if stage < STAGES - 1:
            term = up(g_res[stage][None, :, None, None] * f_res, (Z, X))
        else:
            term = up(f_res, (Z, X))
        if acc is None:
            return term
        return acc + term

