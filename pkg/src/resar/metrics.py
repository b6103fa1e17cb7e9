"""IoU metrics and the evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import CLASS_NAMES
from .geometry import BevGridSpec, range_interval_mask, scaled_range_bins

DA, VEH, LANE_DIV = CLASS_NAMES.index("drivable_area"), CLASS_NAMES.index("vehicle"), CLASS_NAMES.index("lane_divider")


def compute_iou(pred, gt) -> float:
    """|pred ∧ gt| / |pred ∨ gt| over all elements; two empty masks score 1."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def per_class_iou(pred, gt) -> np.ndarray:
    """pred, gt: (N, C, Z, X) binary; IoU per class accumulated over the whole split."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return np.array([compute_iou(pred[:, c], gt[:, c]) for c in range(pred.shape[1])])


def range_iou(pred, gt, grid: BevGridSpec, near: float, far: float) -> float:
    """IoU restricted to cells whose ground distance lies in [near, far); pred/gt (..., Z, X)."""
    m = range_interval_mask(grid, near, far)
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    return compute_iou(pred & m, gt & m)


@dataclass
class EvalReport:
    per_class_iou: dict[str, float]
    miou_all: float
    miou_da_veh: float             # drivable area + vehicle
    miou_da_veh_ld: float          # drivable area + vehicle + lane divider
    vehicle_range_iou: dict[str, float]
    inference_s_per_sample: float = 0.0
    num_samples: int = 0
    threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def _bin_name(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}m"


def evaluate_masks(pred, gt, grid: BevGridSpec, threshold: float = 0.5, inference_s: float = 0.0) -> EvalReport:
    """pred, gt: (N, C, Z, X) binary masks."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape[0] == 0:
        raise ValueError("cannot evaluate an empty split")
    ious = per_class_iou(pred, gt)
    ranges = {"overall": compute_iou(pred[:, VEH], gt[:, VEH])}
    for lo, hi in scaled_range_bins(grid):
        ranges[_bin_name(lo, hi)] = range_iou(pred[:, VEH], gt[:, VEH], grid, lo, hi)
    return EvalReport(
        per_class_iou={name: float(v) for name, v in zip(CLASS_NAMES, ious)},
        miou_all=float(ious.mean()),
        miou_da_veh=float(ious[[DA, VEH]].mean()),
        miou_da_veh_ld=float(ious[[DA, VEH, LANE_DIV]].mean()),
        vehicle_range_iou=ranges,
        inference_s_per_sample=inference_s,
        num_samples=int(pred.shape[0]),
        threshold=threshold,
    )
