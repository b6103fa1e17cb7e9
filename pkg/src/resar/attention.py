"""Deformable attention: BEV-query -> multi-camera image features, and BEV self-attention."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _grid_offset_bias(heads: int, levels: int, points: int) -> torch.Tensor:
    """Initial offsets: each head looks along its own direction, points at growing distances."""
    theta = torch.arange(heads, dtype=torch.float32) * (2.0 * math.pi / heads)
    dirs = torch.stack([theta.cos(), theta.sin()], -1)
    dirs = dirs / dirs.abs().max(-1, keepdim=True)[0]
    grid = dirs.view(heads, 1, 1, 2).repeat(1, levels, points, 1)
    for k in range(points):
        grid[:, :, k, :] *= k + 1
    return grid.flatten()


class _ContiguousGrad(torch.autograd.Function):
    """Identity whose backward makes the incoming gradient contiguous.

    Placed after a reduction so a permuted gradient is copied at the reduced size instead of
    inside grid_sample's backward at the full sampled size.
    """

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.contiguous()


def select_views(uv: torch.Tensor, valid: torch.Tensor, max_views: int):
    """Keep at most ``max_views`` cameras per query, valid cameras first (lowest index wins ties).

    uv: (B, ncam, N, 2), valid: (B, ncam, N) ->
    uv (B, N, V, 2), cam_idx (B, N, V), valid (B, N, V)
    """
    V = min(max_views, valid.shape[1])
    _, order = torch.sort((~valid).to(torch.int8), dim=1, stable=True)
    cam_idx = order[:, :V].permute(0, 2, 1)
    sel_valid = torch.gather(valid, 1, order[:, :V]).permute(0, 2, 1)
    idx = order[:, :V, :, None].expand(-1, -1, -1, 2)
    sel_uv = torch.gather(uv, 1, idx).permute(0, 2, 1, 3)
    return sel_uv, cam_idx, sel_valid


class DeformableCrossAttention(nn.Module):
    """Multi-head, multi-scale deformable sampling of per-camera image features.

    Every query holds up to V projected reference pixels (one per visible camera).
    Each head predicts P offsets per scale around that reference and one logit per
    (scale, point); a single softmax runs over (views × scales × points) with
    invisible views masked out.
    """

    def __init__(self, dim: int, heads: int = 4, levels: int = 3, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        self.value_proj = nn.Conv2d(dim, dim, 1)
        self.sampling_offsets = nn.Linear(dim, heads * levels * points * 2)
        self.attention_weights = nn.Linear(dim, heads * levels * points)
        self.output_proj = nn.Linear(dim, dim)
        self.disabled = False
        self.record_queries: torch.Tensor | None = None
        self.last_record: dict | None = None
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(_grid_offset_bias(self.heads, self.levels, self.points))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, query, uv, cam_idx, valid, features, image_size):
        """query (B, N, D); uv (B, N, V, 2) full-resolution pixels; cam_idx, valid (B, N, V);
        features: list over scales of (B, ncam, D, h, w); image_size (H, W). Returns (B, N, D)."""
        B, N, D = query.shape
        Hh, L, P = self.heads, self.levels, self.points
        d = D // Hh
        if self.disabled:
            return torch.zeros_like(query)
        H, W = image_size
        off = self.sampling_offsets(query).view(B, N, Hh, L, P, 2)
        # logits depend on the query only, so the joint softmax over (views, scales, points)
        # equals a per-view softmax over (scales, points) divided by the number of visible views
        n_valid = valid.sum(-1)
        weights = torch.softmax(self.attention_weights(query).view(B, N, Hh, L * P), -1)
        weights = weights / n_valid.clamp(min=1)[..., None, None].to(weights.dtype)

        canvas, layout = self._canvas(features)
        Hc, Wc = canvas.shape[-2:]
        b_idx, n_idx, v_idx = valid.nonzero(as_tuple=True)
        slot = (b_idx * features[0].shape[1] + cam_idx[b_idx, n_idx, v_idx]).to(query.dtype)
        pix = uv[b_idx, n_idx, v_idx]                                   # (M, 2)
        # per-level (x, y) constants: pixel scale, clamp ceiling, view stride, row offset
        sizes = torch.tensor([[w, h] for _, h, w in layout], dtype=query.dtype, device=query.device)
        scale = sizes / torch.tensor([W, H], dtype=query.dtype, device=query.device)
        origin = torch.tensor([[0.0, row0] for row0, _, _ in layout], dtype=query.dtype, device=query.device)
        loc = pix[:, None, None, None] * scale[:, None] + off[b_idx, n_idx] + 1.0   # (M, Hh, L, P, 2)
        # shift into the zero frame around each view; clamping to the frame centre keeps
        # out-of-image taps exactly zero, as zero padding would
        loc = loc.clamp(min=torch.full_like(sizes, 0.5)[:, None], max=(sizes + 1.5)[:, None])
        loc = loc + origin[:, None]
        loc[..., 0] += slot[:, None, None, None] * (sizes[:, 0] + 2)[:, None]
        norm = torch.tensor([2.0 / Wc, 2.0 / Hc], dtype=query.dtype, device=query.device)
        grid = (loc * norm - 1.0).transpose(0, 1).reshape(Hh, -1, L * P, 2)
        sampled = F.grid_sample(canvas, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        w_pair = weights[b_idx, n_idx].transpose(0, 1).contiguous()[:, None]   # (Hh, 1, M, L*P)
        pair_out = _ContiguousGrad.apply((sampled * w_pair).sum(-1))    # (Hh, d, M)
        pair_out = pair_out.permute(2, 0, 1).reshape(-1, D)
        out = query.new_zeros(B * N, D).index_add(0, b_idx * N + n_idx, pair_out)
        if self.record_queries is not None:
            self.last_record = self._record(uv, cam_idx, valid, off, weights, image_size, layout)
        any_valid = (n_valid > 0)[..., None].to(out.dtype)
        return self.output_proj(out.view(B, N, D)) * any_valid

    def _canvas(self, features):
        """Stack every (batch, camera) view of every scale on one zero-framed canvas.

        Scale ``l`` occupies rows [row0 - 1, row0 + h + 1); view ``s`` of that scale sits in
        columns [s (w + 2), (s + 1)(w + 2)) with a zero column on each side.
        """
        Hh = self.heads
        blocks, layout, row0 = [], [], 0
        width = max(f.shape[0] * f.shape[1] * (f.shape[-1] + 2) for f in features)
        for feat in features:
            B, ncam, D, h, w = feat.shape
            val = self.value_proj(feat.flatten(0, 1)).view(B * ncam, Hh, D // Hh, h, w)
            val = F.pad(val, (1, 1, 1, 1)).permute(1, 2, 3, 0, 4).reshape(Hh, D // Hh, h + 2, -1)
            blocks.append(F.pad(val, (0, width - val.shape[-1])))
            layout.append((row0, h, w))
            row0 += h + 2
        return torch.cat(blocks, dim=2), layout

    @torch.no_grad()
    def _record(self, uv, cam_idx, valid, off, weights, image_size, layout):
        """Sampling locations (full-resolution pixels) and weights for the first batch item."""
        H, W = image_size
        q = self.record_queries
        rec = {"cam_idx": cam_idx[0, q].cpu(), "valid": valid[0, q].cpu()}
        wq = weights[0, q].view(len(q), self.heads, self.levels, self.points)
        for lvl, (_, h, w) in enumerate(layout):
            su, sv = W / w, H / h
            lx = (uv[0, q, None, :, None, 0] / su) + off[0, q, :, None, lvl, :, 0]
            ly = (uv[0, q, None, :, None, 1] / sv) + off[0, q, :, None, lvl, :, 1]
            vmask = valid[0, q][:, None, :, None].to(wq.dtype)
            rec[lvl] = {"u": (lx * su).cpu(), "v": (ly * sv).cpu(),     # (Q, heads, V, P)
                        "weight": (wq[:, :, None, lvl] * vmask).cpu()}
        return rec


class BevDeformableSelfAttention(nn.Module):
    """Each BEV token attends to P learned offsets around its own cell in its height layer."""

    def __init__(self, dim: int, heads: int = 4, points: int = 4):
        super().__init__()
        self.dim, self.heads, self.points = dim, heads, points
        self.value_proj = nn.Linear(dim, dim)
        self.sampling_offsets = nn.Linear(dim, heads * points * 2)
        self.attention_weights = nn.Linear(dim, heads * points)
        self.output_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.sampling_offsets.weight)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(_grid_offset_bias(heads, 1, points))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        for lin in (self.value_proj, self.output_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        """q: (B, layers, h, w, D) -> same shape."""
        B, NL, h, w, D = q.shape
        Hh, P = self.heads, self.points
        d = D // Hh
        x = q.reshape(B * NL, h * w, D)
        val = self.value_proj(x).view(B * NL, h, w, Hh, d).permute(0, 3, 4, 1, 2).reshape(B * NL * Hh, d, h, w)
        off = self.sampling_offsets(x).view(B * NL, h * w, Hh, P, 2)
        aw = torch.softmax(self.attention_weights(x).view(B * NL, h * w, Hh, P), -1)
        zs = (torch.arange(h, dtype=q.dtype, device=q.device) + 0.5) * (2.0 / h) - 1.0
        xs = (torch.arange(w, dtype=q.dtype, device=q.device) + 0.5) * (2.0 / w) - 1.0
        ref = torch.stack(torch.meshgrid(xs, zs, indexing="xy"), -1).reshape(1, h * w, 1, 1, 2)
        scale = torch.tensor([2.0 / w, 2.0 / h], dtype=q.dtype, device=q.device)
        loc = ref + off * scale
        grid = loc.permute(0, 2, 1, 3, 4).reshape(B * NL * Hh, h * w, P, 2)
        sampled = F.grid_sample(val, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        aw = aw.permute(0, 2, 1, 3).reshape(B * NL * Hh, 1, h * w, P)
        out = (sampled * aw).sum(-1).view(B * NL, Hh, d, h * w).permute(0, 3, 1, 2).reshape(B, NL, h, w, D)
        return self.output_proj(out)
