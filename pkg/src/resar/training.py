"""Joint training loop, evaluation, checkpoints and attention dumps."""
from __future__ import annotations

import io
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .codec import GtCodec
from .config import ConfigError, NumericalError, RunConfig, dump_config, from_dict
from .data import PreparedSample, attach_targets, batch_order, collate
from .geometry import BevGridSpec
from .heads import class_weights, dice_loss, residual_loss, total_loss
from .metrics import EvalReport, evaluate_masks, per_class_iou
from .model import Batch, ResarBEV, accumulated_stage_maps
from .raf import STAGE_FACTORS

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def target_mode(cfg: RunConfig) -> str | None:
    if cfg.variant == "end_to_end":
        return None
    return "pyramid" if cfg.variant == "pyramid_no_residual" else "residual"


def build_model(cfg: RunConfig, n_cameras: int | None = None) -> ResarBEV:
    torch.manual_seed(cfg.seed)
    return ResarBEV(cfg, n_cameras)


def compute_losses(model: ResarBEV, batch: Batch, cfg: RunConfig, weights=None) -> dict[str, torch.Tensor]:
    out = model(batch)
    seg = dice_loss(out.logits, batch.gt, weights, cfg.loss.epsilon)
    if cfg.uses_stage_losses:
        if batch.targets is None:
            raise ConfigError("stage supervision needs per-stage targets (frozen codec missing?)")
        stages = [residual_loss(p, t, cfg.loss) for p, t in zip(out.tp_hat, batch.targets)]
    else:
        stages = [seg.new_zeros(()) for _ in out.tp_hat]
    losses = {f"loss_stage{i + 1}": s for i, s in enumerate(stages)}
    losses["loss_seg"] = seg
    losses["loss_total"] = total_loss(stages, seg, cfg.loss)
    losses["_logits"] = out.logits
    return losses


def batch_miou(logits: torch.Tensor, gt: torch.Tensor, threshold: float) -> float:
    pred = (torch.sigmoid(logits) >= threshold).detach().cpu().numpy()
    return float(per_class_iou(pred, gt.cpu().numpy() > 0.5).mean())


class Trainer:
    """Adam on the weighted sum of stage and segmentation losses; fully seed-determined."""

    def __init__(self, cfg: RunConfig, train_items: list[PreparedSample], val_items=None,
                 codec: GtCodec | None = None, class_frequency=None, out_dir: str | Path | None = None):
        mode = target_mode(cfg)
        if mode == "residual" and codec is None:
            raise ConfigError(f"variant {cfg.variant!r} needs a pretrained codec checkpoint")
        if not train_items:
            raise ConfigError("training split is empty")
        self.cfg = cfg
        self.train_items = list(train_items)
        self.val_items = list(val_items or [])
        self.codec = codec
        attach_targets(self.train_items + self.val_items, codec, mode or "none")
        n_cameras = self.train_items[0].K.shape[0]
        self.model = build_model(cfg, n_cameras)
        self.optimizer = torch.optim.Adam([p for p in self.model.parameters() if p.requires_grad], lr=cfg.train.lr)
        freq = class_frequency
        if freq is None:
            freq = torch.stack([it.gt for it in self.train_items]).mean(dim=(0, 2, 3)).numpy()
        self.class_weights = torch.as_tensor(class_weights(freq), dtype=torch.float32)
        self.step = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[dict] = []
        self.with_radar = cfg.variant != "camera_only"

    # -- data ------------------------------------------------------------------
    def _batch_indices(self, step: int) -> np.ndarray:
        n, bs = len(self.train_items), self.cfg.train.batch_size
        per_epoch = -(-n // bs)
        epoch, j = divmod(step, per_epoch)
        return batch_order(n, bs, self.cfg.seed, epoch, shuffle=n > bs)[j]

    def batch_for_step(self, step: int) -> Batch:
        return collate([self.train_items[i] for i in self._batch_indices(step)], self.with_radar)

    # -- optimization ------------------------------------------------------------
    def train_step(self) -> dict:
        self.model.train()
        batch = self.batch_for_step(self.step)
        losses = compute_losses(self.model, batch, self.cfg, self.class_weights)
        total = losses["loss_total"]
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite loss at step {self.step}: {total.item()}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()
        self.step += 1
        record = {"step": self.step, "split": "batch"}
        record.update({k: float(v.detach()) for k, v in losses.items() if not k.startswith("_")})
        record["miou"] = batch_miou(losses["_logits"], batch.gt, self.cfg.eval_threshold)
        return record

    def run(self, steps: int | None = None, callback=None, stop_at_miou: float | None = None) -> list[dict]:
        """Train for ``steps`` more steps; optionally stop once the batch mIoU reaches a target."""
        steps = self.cfg.train.steps if steps is None else steps
        tc = self.cfg.train
        for _ in range(steps):
            rec = self.train_step()
            if self.step % tc.log_every == 0 or self.step == 1:
                self._log(rec)
            if tc.eval_every and self.step % tc.eval_every == 0:
                self._log(self.eval_record("train", self.train_items[:32]))
                if self.val_items:
                    self._log(self.eval_record("val", self.val_items))
            if callback is not None:
                callback(self, rec)
            if stop_at_miou is not None and rec["miou"] >= stop_at_miou:
                self._log(rec)
                break
        return self.history

    def eval_record(self, split: str, items) -> dict:
        report, _ = evaluate(self.model, items, self.cfg)
        return {"step": self.step, "split": split, "miou": report.miou_all,
                "miou_da_veh": report.miou_da_veh, "miou_da_veh_ld": report.miou_da_veh_ld}

    def _log(self, rec: dict) -> None:
        if self.history and self.history[-1] == rec:
            return
        self.history.append(rec)
        log.info(json.dumps(rec))
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    # -- persistence ---------------------------------------------------------------
    def resume_state(self) -> dict:
        return {"model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(), "step": self.step}

    def load_resume_state(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = int(state["step"])

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.npz", self.model, self.cfg, self.step)
        torch.save(self.resume_state(), out / "resume.pt")
        dump_config(self.cfg, out / "config.yaml")


# -- evaluation -------------------------------------------------------------------

@torch.no_grad()
def predict(model: ResarBEV, items: list[PreparedSample], cfg: RunConfig, batch_size: int | None = None):
    """Sigmoid probabilities (N, C, Z, X), per-stage token-map predictions and mean seconds per sample."""
    model.eval()
    bs = batch_size or cfg.train.batch_size
    probs, stage_preds, elapsed = [], [], 0.0
    with_radar = cfg.variant != "camera_only"
    for i in range(0, len(items), bs):
        batch = collate(items[i:i + bs], with_radar)
        t0 = time.perf_counter()
        out = model(batch)
        p = torch.sigmoid(out.logits)
        elapsed += time.perf_counter() - t0
        probs.append(p.numpy())
        stage_preds.append([t.numpy() for t in out.tp_hat])
    stages = [np.concatenate([s[k] for s in stage_preds]) for k in range(len(STAGE_FACTORS))] if stage_preds else []
    n = max(len(items), 1)
    return (np.concatenate(probs) if probs else np.zeros((0,))), stages, elapsed / n


def evaluate(model: ResarBEV, items: list[PreparedSample], cfg: RunConfig) -> tuple[EvalReport, np.ndarray]:
    if not items:
        raise ConfigError("evaluation split is empty")
    probs, _, per_sample = predict(model, items, cfg)
    gt = np.stack([it.gt.numpy() > 0.5 for it in items])
    grid = BevGridSpec.from_config(cfg.grid)
    report = evaluate_masks(probs >= cfg.eval_threshold, gt, grid, cfg.eval_threshold, per_sample)
    conditions = sorted({it.condition for it in items})
    if len(conditions) > 1:
        pred = probs >= cfg.eval_threshold
        report.extra["condition_miou"] = {
            c: float(per_class_iou(pred[[i for i, it in enumerate(items) if it.condition == c]],
                                   gt[[i for i, it in enumerate(items) if it.condition == c]]).mean())
            for c in conditions
        }
    return report, probs


def stage_maps(model: ResarBEV, items: list[PreparedSample], cfg: RunConfig, codec: GtCodec | None):
    """Accumulated decoded stage maps (N, 4, C, Z, X), final probabilities and ground truth."""
    probs, stages, _ = predict(model, items, cfg)
    gate = codec.gate_theta.detach() if codec is not None else None
    acc = accumulated_stage_maps([torch.as_tensor(s) for s in stages], gate)
    return np.stack([a.numpy() for a in acc], axis=1), probs, np.stack([it.gt.numpy() for it in items])


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: ResarBEV, cfg: RunConfig, step: int) -> None:
    arrays = {"format_version": np.array(CHECKPOINT_FORMAT_VERSION), "step": np.array(step),
              "config": np.array(json.dumps(cfg.to_dict()))}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, n_cameras: int | None = None) -> tuple[ResarBEV, RunConfig, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing model checkpoint: {path}")
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version} in {path}")
        cfg = from_dict(json.loads(str(data["config"])))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        step = int(data["step"])
    model = build_model(cfg, n_cameras)
    model.load_state_dict(state)
    return model.eval(), cfg, step


# -- attention dumps ----------------------------------------------------------------

def cross_attention_modules(model: ResarBEV):
    """(stage, decoder layer, module) for every image cross-attention in the cascade."""
    out = []
    for stage in range(len(STAGE_FACTORS)):
        for k, layer in enumerate(model.raf.stage_layers(stage)):
            out.append((stage, k, layer.cross_attn))
    return out


@torch.no_grad()
def dump_attention(model: ResarBEV, item: PreparedSample, cells: list[tuple[int, int]], cfg: RunConfig,
                   path: str | Path) -> dict:
    """Record sampling locations and weights of the chosen full-resolution BEV cells at every stage."""
    Z, X = model.grid.shape
    nl = len(cfg.raf.height_layers_m)
    arrays = {"cells": np.asarray(cells, dtype=np.int64), "images": item.images,
              "image_size": np.asarray(item.images.shape[-2:])}
    mods = cross_attention_modules(model)
    for stage, _, mod in mods:
        f = STAGE_FACTORS[stage]
        h, w = Z // f, X // f
        idx = [layer * h * w + (z // f) * w + (x // f) for layer in range(nl) for z, x in cells]
        mod.record_queries = torch.as_tensor(idx, dtype=torch.long)
    try:
        model.eval()
        model(collate([item], cfg.variant != "camera_only"))
        for stage, k, mod in mods:
            rec = mod.last_record
            pre = f"s{stage}_l{k}"
            arrays[f"{pre}_cam_idx"] = rec["cam_idx"].numpy()
            arrays[f"{pre}_valid"] = rec["valid"].numpy()
            arrays[f"{pre}_points"] = np.array(mod.points)
            for lvl in range(mod.levels):
                for key in ("u", "v", "weight"):
                    arrays[f"{pre}_lvl{lvl}_{key}"] = rec[lvl][key].numpy()
    finally:
        for _, _, mod in mods:
            mod.record_queries = None
            mod.last_record = None
    arrays["height_layers"] = np.array(nl)
    np.savez(path, **arrays)
    return arrays


def save_run_config(cfg: RunConfig, out_dir: str | Path) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    dump_config(cfg, Path(out_dir) / "config.yaml")
