"""Figures from run artifacts: stage panels, mIoU curves and attention overlays."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import CLASS_NAMES  # noqa: E402

CLASS_COLORS = np.array([
    [0.55, 0.55, 0.60],   # drivable area
    [0.95, 0.55, 0.10],   # ped crossing
    [0.60, 0.45, 0.25],   # walkway
    [0.90, 0.10, 0.10],   # stop line
    [0.95, 0.90, 0.10],   # road divider
    [0.10, 0.85, 0.85],   # lane divider
    [0.15, 0.25, 0.95],   # vehicle
])


def colorize(masks: np.ndarray) -> np.ndarray:
    """(C, Z, X) values in [0, 1] -> (Z, X, 3) image, later classes painted on top; far z at the top."""
    C = masks.shape[0]
    img = np.ones(masks.shape[1:] + (3,))
    for c in range(C):
        a = np.clip(masks[c], 0.0, 1.0)[..., None]
        img = img * (1 - a) + CLASS_COLORS[c % len(CLASS_COLORS)] * a
    return img[::-1]


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    return path


def plot_stage_panels(stage_file: str | Path, out_dir: str | Path, threshold: float = 0.5) -> list[Path]:
    """One figure per sample: four accumulated stage maps, the thresholded output and the ground truth."""
    with np.load(_require(Path(stage_file))) as data:
        stages, probs, gt = data["stages"], data["probs"], data["gt"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n in range(stages.shape[0]):
        fig, axes = plt.subplots(1, stages.shape[1] + 2, figsize=(3 * (stages.shape[1] + 2), 3.2))
        for k in range(stages.shape[1]):
            # token maps live in (-1, 1); show the positive part as class occupancy
            axes[k].imshow(colorize(np.clip(stages[n, k], 0, 1)))
            axes[k].set_title(f"stage {k + 1}")
        axes[-2].imshow(colorize((probs[n] >= threshold).astype(float)))
        axes[-2].set_title("final")
        axes[-1].imshow(colorize(gt[n]))
        axes[-1].set_title("ground truth")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        p = out / f"stages_{n:03d}.png"
        fig.tight_layout()
        fig.savefig(p, dpi=80)
        plt.close(fig)
        paths.append(p)
    return paths


def read_metrics(path: str | Path) -> list[dict]:
    lines = _require(Path(path)).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def plot_curves(metrics_file: str | Path, out_path: str | Path) -> dict[str, list[int]]:
    """Train/val mIoU against step plus the loss trace. Returns the steps drawn per series."""
    records = read_metrics(metrics_file)
    series: dict[str, tuple[list[int], list[float]]] = {}
    for r in records:
        if "miou" not in r:
            continue
        name = {"batch": "train batch", "train": "train", "val": "val"}.get(r.get("split"), r.get("split", "?"))
        steps, vals = series.setdefault(name, ([], []))
        steps.append(r["step"])
        vals.append(r["miou"])
    loss = [(r["step"], r["loss_total"]) for r in records if "loss_total" in r]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for name, (steps, vals) in series.items():
        a1.plot(steps, vals, marker="." if len(steps) < 50 else None, label=name)
    a1.set_xlabel("step")
    a1.set_ylabel("mIoU")
    a1.legend()
    if loss:
        s, v = zip(*loss)
        a2.plot(s, v)
        a2.set_yscale("log")
    a2.set_xlabel("step")
    a2.set_ylabel("total loss")
    fig.tight_layout()
    fig.savefig(out_path, dpi=80)
    plt.close(fig)
    return {name: steps for name, (steps, _) in series.items()}


def attention_points(dump: dict, stage: int, layer: int, query: int, head: int):
    """Sampling points of one (stage, decoder layer, query, head): list of (camera, level, u, v, weight)."""
    pre = f"s{stage}_l{layer}"
    cams, valid = dump[f"{pre}_cam_idx"][query], dump[f"{pre}_valid"][query]
    out = []
    lvl = 0
    while f"{pre}_lvl{lvl}_u" in dump:
        u, v, w = (dump[f"{pre}_lvl{lvl}_{k}"][query, head] for k in ("u", "v", "weight"))
        for view in range(len(cams)):
            if not valid[view]:
                continue
            for p in range(u.shape[-1]):
                out.append((int(cams[view]), lvl, float(u[view, p]), float(v[view, p]), float(w[view, p])))
        lvl += 1
    return out


def plot_attention(dump_file: str | Path, out_dir: str | Path, query: int = 0) -> list[Path]:
    """Overlay one BEV query's sampling points on the camera images: one figure per (stage, layer)."""
    with np.load(_require(Path(dump_file))) as data:
        dump = {k: data[k] for k in data.files}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = dump["images"]
    stages = sorted({int(k[1]) for k in dump if k.startswith("s") and k[1].isdigit()})
    heads = dump["s0_l0_lvl0_u"].shape[1]
    markers = "ox^s"
    paths = []
    for stage in stages:
        layer = 0
        while f"s{stage}_l{layer}_cam_idx" in dump:
            pts = {h: attention_points(dump, stage, layer, query, h) for h in range(heads)}
            cams = sorted({c for h in pts for c, *_ in pts[h]}) or [0]
            fig, axes = plt.subplots(1, len(cams), figsize=(4 * len(cams), 3), squeeze=False)
            for ax, cam in zip(axes[0], cams):
                ax.imshow(images[cam].transpose(1, 2, 0))
                for h in range(heads):
                    sel = [(l, u, v, w) for c, l, u, v, w in pts[h] if c == cam]
                    if sel:
                        _, u, v, w = map(np.asarray, zip(*sel))
                        ax.scatter(u, v, s=20 + 200 * w, marker=markers[h % len(markers)],
                                   label=f"head {h}", alpha=0.8)
                ax.set_title(f"stage {stage + 1} layer {layer + 1} cam {cam}")
                ax.set_xlim(0, images.shape[-1])
                ax.set_ylim(images.shape[-2], 0)
            if axes[0][0].get_legend_handles_labels()[0]:
                axes[0][0].legend(fontsize=6)
            p = out / f"attn_s{stage + 1}_l{layer + 1}_q{query}.png"
            fig.tight_layout()
            fig.savefig(p, dpi=80)
            plt.close(fig)
            paths.append(p)
            layer += 1
    return paths


__all__ = ["plot_stage_panels", "plot_curves", "plot_attention", "attention_points", "colorize", "CLASS_NAMES"]
