"""Shared BEV-GT decoder and the training objectives."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossConfig


class _ResidualBlock(nn.Module):
    """Depthwise 3x3 spatial mixing followed by pointwise channel fusion, with identity skip."""

    def __init__(self, dim: int):
        super().__init__()
        self.spatial = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.fuse1 = nn.Conv2d(dim, dim, 1)
        self.fuse2 = nn.Conv2d(dim, dim, 1)
        for m in (self.spatial, self.fuse1, self.fuse2):
            nn.init.zeros_(m.bias)

    def forward(self, x):
        return F.relu(x + self.fuse2(F.relu(self.fuse1(self.spatial(x)))))


class BevGtDecoder(nn.Module):
    """D-channel BEV features -> C-channel logits at the same spatial size.

    One instance is applied to every stage output and to the accumulated
    feature, so all scales share these weights.
    """

    def __init__(self, dim: int, num_classes: int, blocks: int = 3):
        super().__init__()
        self.blocks = nn.Sequential(*[_ResidualBlock(dim) for _ in range(blocks)])
        self.classifier = nn.Conv2d(dim, num_classes, 1)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, f):
        return self.classifier(self.blocks(f))


def residual_loss(tp_hat: torch.Tensor, tp: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Token-map reconstruction loss.

    spatial: mean over (b, z, x) of the norm of the per-location class vector difference.
    channel: mean over (b, c) of the norm of the per-class Z×X difference map.
    """
    if tp_hat.shape != tp.shape:
        raise ValueError(f"shape mismatch {tuple(tp_hat.shape)} vs {tuple(tp.shape)}")
    if tp.dim() == 3:
        tp_hat, tp = tp_hat[None], tp[None]
    diff = tp_hat - tp
    dims = (1,) if cfg.reduction == "spatial" else (2, 3)
    if cfg.residual_norm == "l1":
        per = diff.abs().sum(dim=dims)
    elif cfg.residual_norm == "l2":
        per = torch.linalg.vector_norm(diff, ord=2, dim=dims)
    elif cfg.residual_norm == "smooth_l1":
        per = F.smooth_l1_loss(tp_hat, tp, reduction="none", beta=cfg.smooth_l1_beta).sum(dim=dims)
    else:
        raise ValueError(f"unknown residual norm {cfg.residual_norm!r}")
    return per.mean()


def class_weights(freqs: Sequence[float]) -> np.ndarray:
    """Frequency-adaptive weights w_c = (1 - f_c) / mean(1 - f); rarer classes weigh more."""
    f = np.asarray(freqs, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("need a non-empty 1-D frequency vector")
    if ((f < 0) | (f > 1)).any():
        raise ValueError("class frequencies must lie in [0, 1]")
    comp = 1.0 - f
    denom = comp.mean()
    if denom <= 0:
        raise ValueError("degenerate class frequencies: every class covers every pixel")
    return comp / denom


def soft_dice(probs: torch.Tensor, gt: torch.Tensor, weights=None, eps: float = 1e-5) -> torch.Tensor:
    """Class-weighted Dice loss on probabilities; sums over batch and space per class."""
    if probs.dim() == 3:
        probs, gt = probs[None], gt[None]
    gt = gt.to(probs.dtype)
    inter = (probs * gt).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + gt.sum(dim=(0, 2, 3))
    per_class = 1.0 - (2.0 * inter + eps) / (denom + eps)
    if weights is None:
        return per_class.mean()
    w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
    return (w * per_class).mean()


def dice_loss(logits: torch.Tensor, gt: torch.Tensor, weights=None, eps: float = 1e-5) -> torch.Tensor:
    return soft_dice(torch.sigmoid(logits), gt, weights, eps)


def total_loss(stage_losses: Sequence, seg_loss, cfg: LossConfig):
    out = cfg.seg_weight * seg_loss
    for w, loss in zip(cfg.stage_weights, stage_losses, strict=True):
        out = out + w * loss
    return out
