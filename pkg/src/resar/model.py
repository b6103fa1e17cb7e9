"""End-to-end network: encoders, RAF cascade and the shared BEV-GT decoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .codec import up
from .config import CLASS_NAMES, RunConfig
from .encoders import ImageBackbone, RadarBatch, RadarEncoder
from .geometry import BevGridSpec
from .heads import BevGtDecoder
from .raf import STAGES, RafModule, RafOutputs


@dataclass
class Batch:
    images: torch.Tensor                  # (B, ncam, 3, H, W) in [0, 1]
    radar: RadarBatch | None
    K: torch.Tensor                       # (B, ncam, 3, 3)
    R: torch.Tensor
    t: torch.Tensor                       # (B, ncam, 3)
    gt: torch.Tensor | None = None        # (B, C, Z, X) binary
    targets: list[torch.Tensor] | None = None   # per-stage token maps

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def to(self, dtype) -> "Batch":
        return Batch(self.images.to(dtype), None if self.radar is None else self.radar.to(dtype=dtype),
                     self.K.to(dtype), self.R.to(dtype), self.t.to(dtype),
                     None if self.gt is None else self.gt.to(dtype),
                     None if self.targets is None else [t.to(dtype) for t in self.targets])


@dataclass
class ModelOutput:
    raf: RafOutputs
    tp_hat: list[torch.Tensor]            # tanh(decode(f'_i)) per stage
    logits: torch.Tensor                  # decode(acc)


class ResarBEV(nn.Module):
    def __init__(self, cfg: RunConfig, n_cameras: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.grid = BevGridSpec.from_config(cfg.grid)
        dim = cfg.encoder.embed_dim
        n_cameras = n_cameras or cfg.scene.n_cameras
        self.camera_only = cfg.variant == "camera_only"
        self.image_encoder = ImageBackbone(dim, cfg.encoder.backbone_channels)
        self.radar_encoder = None if self.camera_only else RadarEncoder(self.grid, dim, cfg.encoder.max_points)
        self.raf = RafModule(
            self.grid, cfg.raf, dim, n_cameras,
            camera_only=self.camera_only,
            use_gates=cfg.variant != "no_gates",
            learnable_height=cfg.variant != "fixed_height",
            residual=cfg.variant != "pyramid_no_residual",
        )
        self.decoder = BevGtDecoder(dim, len(CLASS_NAMES))

    def forward(self, batch: Batch) -> ModelOutput:
        image_size = tuple(batch.images.shape[-2:])
        features = self.image_encoder(batch.images)
        f_vox = None if self.camera_only else self.radar_encoder(batch.radar)
        raf = self.raf(f_vox, features, (batch.K, batch.R, batch.t), image_size)
        tp_hat = [torch.tanh(self.decoder(f)) for f in raf.residuals]
        logits = self.decoder(raf.acc)
        return ModelOutput(raf, tp_hat, logits)


def accumulated_stage_maps(tp_hat: list[torch.Tensor], gate_theta: torch.Tensor | None) -> list[torch.Tensor]:
    """Running reconstruction after each stage: Σ_{i<=k} gate_i · up(TP̂_i), last stage ungated.

    ``gate_theta`` are the codec's gate logits (None -> unit gates).
    """
    shape = tuple(tp_hat[-1].shape[-2:])
    maps, total = [], 0
    for i, tp in enumerate(tp_hat):
        term = up(tp, shape)
        if i < STAGES - 1 and gate_theta is not None:
            term = torch.sigmoid(gate_theta[i]).to(tp.dtype)[None, :, None, None] * term
        total = total + term
        maps.append(total)
    return maps
