"""Offline ground-truth codec: multi-resolution gated residual token maps.

A binary C×Z×X mask is peeled into four token maps at 1/8, 1/4, 1/2 and 1/1
resolution. Each coarse level explains part of the current residual, the
gated, bicubically upsampled explanation is subtracted, and whatever is left
at full resolution becomes the last map.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodecConfig, ConfigError, NumericalError
from .heads import soft_dice

CODEC_FORMAT_VERSION = 1


def _ratio(src: int, dst: int) -> int:
    if dst <= 0 or src % dst:
        raise ConfigError(f"cannot pool {src} -> {dst}: ratio is not an integer")
    r = src // dst
    if r & (r - 1):
        raise ConfigError(f"pooling ratio {r} is not a power of two")
    return r


def down(level_input: torch.Tensor, target: tuple[int, int], conv: nn.Conv2d | None = None) -> torch.Tensor:
    """Average-pool to ``target`` then apply the per-class (depthwise) kernel. No squashing here."""
    h, w = level_input.shape[-2:]
    rz, rx = _ratio(h, target[0]), _ratio(w, target[1])
    if rz != rx:
        raise ConfigError(f"anisotropic pooling ratio {rz} vs {rx}")
    squeeze = level_input.dim() == 3
    x = level_input[None] if squeeze else level_input
    if rz > 1:
        x = F.avg_pool2d(x, rz)
    if conv is not None:
        x = conv(x)
    return x[0] if squeeze else x


def up(tp: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Parameter-free bicubic upsampling (half-pixel centers, replicated borders)."""
    h, w = tp.shape[-2:]
    if (h, w) == tuple(target):
        return tp
    if target[0] < h or target[1] < w:
        raise ConfigError("up() only enlarges")
    squeeze = tp.dim() == 3
    x = tp[None] if squeeze else tp
    x = F.interpolate(x, size=tuple(target), mode="bicubic", align_corners=False)
    return x[0] if squeeze else x


@dataclass
class TokenMapPyramid:
    levels: list[torch.Tensor]      # coarse -> fine, values in (-1, 1)
    gate_theta: torch.Tensor        # (levels - 1, C), raw gate logits

    @property
    def gates(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_theta)

    @property
    def full_shape(self) -> tuple[int, int]:
        return tuple(self.levels[-1].shape[-2:])


def gated_terms(pyramid: TokenMapPyramid) -> list[torch.Tensor]:
    """σ(θ_i) ⊙ up(TP_i) for every gated level."""
    out = []
    for tp, g in zip(pyramid.levels[:-1], pyramid.gates):
        gate = g.to(tp.dtype)[:, None, None]
        out.append(gate * up(tp, pyramid.full_shape))
    return out


def reconstruct(pyramid: TokenMapPyramid) -> torch.Tensor:
    """Gated sum of the upsampled coarse maps plus the ungated full-resolution map."""
    total = pyramid.levels[-1]
    for term in gated_terms(pyramid):
        total = total + term
    return total


@dataclass
class Decomposition:
    pyramid: TokenMapPyramid
    residual: torch.Tensor          # R_N, before the final tanh
    gt_hat: torch.Tensor
    terms: list[torch.Tensor]       # gated, upsampled coarse contributions


class GtCodec(nn.Module):
    def __init__(self, num_classes: int = 7, levels: int = 4, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError("codec kernel size must be odd")
        self.num_classes = num_classes
        self.levels = levels
        self.gate_theta = nn.Parameter(torch.zeros(levels - 1, num_classes))
        self.down_convs = nn.ModuleList()
        for _ in range(levels - 1):
            conv = nn.Conv2d(num_classes, num_classes, kernel_size, padding=kernel_size // 2,
                             groups=num_classes, padding_mode="replicate")
            with torch.no_grad():
                conv.weight.zero_()
                conv.weight[:, 0, kernel_size // 2, kernel_size // 2] = 1.0
                conv.bias.zero_()
            self.down_convs.append(conv)

    def factors(self) -> list[int]:
        return [2 ** (self.levels - 1 - i) for i in range(self.levels - 1)]

    def _check(self, gt: torch.Tensor) -> torch.Tensor:
        if gt.dim() == 3:
            gt = gt[None]
        if gt.dim() != 4 or gt.shape[1] != self.num_classes:
            raise ValueError(f"expected (B, {self.num_classes}, Z, X) mask, got {tuple(gt.shape)}")
        top = 2 ** (self.levels - 1)
        if gt.shape[-2] % top or gt.shape[-1] % top:
            raise ConfigError(f"grid {tuple(gt.shape[-2:])} not divisible by {top}")
        if not ((gt == 0) | (gt == 1)).all():
            raise ValueError("ground-truth mask must be binary {0, 1}")
        return gt

    def decompose(self, gt: torch.Tensor) -> Decomposition:
        squeeze = gt.dim() == 3
        gt = self._check(gt).to(self.gate_theta.dtype)
        Z, X = gt.shape[-2:]
        residual = gt
        levels, terms = [], []
        gates = torch.sigmoid(self.gate_theta)
        for i, f in enumerate(self.factors()):
            tp = torch.tanh(down(residual, (Z // f, X // f), self.down_convs[i]))
            term = gates[i][None, :, None, None] * up(tp, (Z, X))
            residual = residual - term
            levels.append(tp)
            terms.append(term)
        levels.append(torch.tanh(residual))
        gt_hat = levels[-1]
        for term in terms:
            gt_hat = gt_hat + term
        if squeeze:
            levels = [t[0] for t in levels]
            terms = [t[0] for t in terms]
            residual, gt_hat = residual[0], gt_hat[0]
        return Decomposition(TokenMapPyramid(levels, self.gate_theta), residual, gt_hat, terms)

    def forward(self, gt):
        return self.decompose(gt)


def reconstruction_dice(gt_hat: torch.Tensor, gt: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Dice between the reconstruction and the mask.

    The gated sum is not confined to [0, 1] and soft Dice rewards overshoot there,
    so the reconstruction is clamped to the probability range first.
    """
    return soft_dice(gt_hat.clamp(0.0, 1.0), gt, eps=eps)


class CodecPretrainer:
    """Deterministic Adam loop minimizing Dice(gt_hat, gt) with uniform class weights.

    The minibatch for step ``k`` depends only on ``(seed, k)`` so a run resumed
    from ``state_dict()`` continues exactly where it stopped.
    """

    def __init__(self, masks: torch.Tensor, cfg: CodecConfig, seed: int, num_classes: int | None = None,
                 eps: float = 1e-5):
        self.masks = masks.float()
        self.cfg = cfg
        self.seed = seed
        self.eps = eps
        torch.manual_seed(seed)
        self.codec = GtCodec(num_classes or masks.shape[1], kernel_size=cfg.kernel_size)
        self.optimizer = torch.optim.Adam(self.codec.parameters(), lr=cfg.lr)
        self.step = 0
        self.losses: list[float] = []

    def _batch(self, step: int) -> torch.Tensor:
        n = self.masks.shape[0]
        rng = np.random.default_rng([self.seed, step])
        idx = rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        return self.masks[torch.as_tensor(np.sort(idx))]

    def train_step(self) -> float:
        gt = self._batch(self.step)
        out = self.codec.decompose(gt)
        loss = reconstruction_dice(out.gt_hat, gt, self.eps)
        if not torch.isfinite(loss):
            raise NumericalError(f"codec pretraining diverged at step {self.step}: loss={loss.item()}")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        value = float(loss.item())
        self.losses.append(value)
        return value

    def run(self, steps: int, callback=None) -> list[float]:
        for _ in range(steps):
            value = self.train_step()
            if callback is not None:
                callback(self.step, value)
        return self.losses

    @torch.no_grad()
    def evaluate(self, masks: torch.Tensor | None = None) -> float:
        masks = self.masks if masks is None else masks.float()
        out = self.codec.decompose(masks)
        return float(reconstruction_dice(out.gt_hat, masks, self.eps))

    def state_dict(self) -> dict:
        return {"codec": self.codec.state_dict(), "optimizer": self.optimizer.state_dict(),
                "step": self.step, "losses": list(self.losses), "seed": self.seed}

    def load_state_dict(self, state: dict) -> None:
        self.codec.load_state_dict(state["codec"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = state["step"]
        self.losses = list(state["losses"])


def pretrain_codec(masks: torch.Tensor, cfg: CodecConfig, seed: int) -> tuple[GtCodec, list[float]]:
    trainer = CodecPretrainer(masks, cfg, seed)
    losses = trainer.run(cfg.steps)
    trainer.codec.eval().requires_grad_(False)
    return trainer.codec, losses


def save_codec(path: str | Path, codec: GtCodec, meta: dict | None = None) -> None:
    arrays = {"format_version": np.array(CODEC_FORMAT_VERSION)}
    for i in range(codec.levels - 1):
        arrays[f"gate_theta_{i + 1}"] = codec.gate_theta[i].detach().cpu().double().numpy()
        arrays[f"down_kernel_{i + 1}"] = codec.down_convs[i].weight.detach().cpu().double().numpy()
        arrays[f"down_bias_{i + 1}"] = codec.down_convs[i].bias.detach().cpu().double().numpy()
    header = {"num_classes": codec.num_classes, "levels": codec.levels,
              "kernel_size": codec.down_convs[0].kernel_size[0],
              "shapes": {k: list(v.shape) for k, v in arrays.items()}, **(meta or {})}
    arrays["header"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_codec(path: str | Path) -> GtCodec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing codec checkpoint: {path}")
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CODEC_FORMAT_VERSION:
            raise ValueError(f"unsupported codec checkpoint version {version}")
        header = json.loads(str(data["header"]))
        codec = GtCodec(header["num_classes"], header["levels"], header["kernel_size"])
        with torch.no_grad():
            for i in range(codec.levels - 1):
                codec.gate_theta[i] = torch.from_numpy(data[f"gate_theta_{i + 1}"]).float()
                codec.down_convs[i].weight.copy_(torch.from_numpy(data[f"down_kernel_{i + 1}"]))
                codec.down_convs[i].bias.copy_(torch.from_numpy(data[f"down_bias_{i + 1}"]))
    return codec.eval().requires_grad_(False)


def level_shapes(Z: int, X: int, levels: int = 4) -> list[tuple[int, int]]:
    return [(Z // 2 ** (levels - 1 - i), X // 2 ** (levels - 1 - i)) for i in range(levels)]


def dice_reconstruction_loss(codec: GtCodec, masks: torch.Tensor, eps: float = 1e-5) -> float:
    with torch.no_grad():
        out = codec.decompose(masks.to(codec.gate_theta.dtype))
        return float(reconstruction_dice(out.gt_hat, masks.to(out.gt_hat.dtype), eps))


__all__ = [
    "GtCodec", "TokenMapPyramid", "Decomposition", "CodecPretrainer", "down", "up", "reconstruct",
    "gated_terms", "pretrain_codec", "reconstruction_dice", "save_codec", "load_codec", "level_shapes",
]
