"""Metric BEV lattice, pinhole projection, ego-pose alignment and range masks.

Frame convention: everything lives in the front-camera frame of the current
sweep (OpenCV axes): X lateral (right), Y vertical (down), Z driving direction.
The ground plane therefore sits at ``y = +camera_height``. BEV rasters are
indexed ``[z, x]`` and cell centers are ``min + (index + 0.5) * res``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ConfigError, GridConfig

DEPTH_EPS = 1e-6
INVALID_UV = -1.0


@dataclass(frozen=True)
class BevGridSpec:
    x_extent_m: tuple[float, float] = (-16.0, 16.0)
    z_extent_m: tuple[float, float] = (-16.0, 16.0)
    x_cells: int = 64
    z_cells: int = 64
    y_cells: int = 15
    y_res_m: float = 0.2
    y_prior_m: float = 1.0

    def __post_init__(self):
        for name, (lo, hi), n in (("x", self.x_extent_m, self.x_cells), ("z", self.z_extent_m, self.z_cells)):
            if n <= 0 or hi <= lo:
                raise ConfigError(f"{name} axis needs positive cells and max > min")
            if n % 8:
                raise ConfigError(f"{name}_cells={n} must be divisible by 8")
        if self.y_cells <= 0 or self.y_res_m <= 0:
            raise ConfigError("y_cells and y_res_m must be positive")

    @classmethod
    def from_config(cls, cfg: GridConfig) -> "BevGridSpec":
        return cls(tuple(cfg.x_extent_m), tuple(cfg.z_extent_m), cfg.x_cells, cfg.z_cells,
                   cfg.y_cells, cfg.y_res_m, cfg.y_prior_m)

    @property
    def x_res(self) -> float:
        return (self.x_extent_m[1] - self.x_extent_m[0]) / self.x_cells

    @property
    def z_res(self) -> float:
        return (self.z_extent_m[1] - self.z_extent_m[0]) / self.z_cells

    @property
    def y_extent_m(self) -> tuple[float, float]:
        half = self.y_cells * self.y_res_m / 2
        return (self.y_prior_m - half, self.y_prior_m + half)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.z_cells, self.x_cells)

    def cell_centers(self, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """(z, x) metric centers of the grid coarsened by ``stride``; each of shape (Z/stride, X/stride)."""
        zs = self.z_extent_m[0] + (np.arange(self.z_cells // stride) + 0.5) * self.z_res * stride
        xs = self.x_extent_m[0] + (np.arange(self.x_cells // stride) + 0.5) * self.x_res * stride
        zz, xx = np.meshgrid(zs, xs, indexing="ij")
        return zz, xx

    def max_range(self) -> float:
        """Half extent of the ground plane (used to rescale range bins)."""
        return min(abs(v) for v in (*self.x_extent_m, *self.z_extent_m))


def _as_matrix(values, shape) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(shape)
    return arr


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; ``rotation``/``translation`` map reference -> camera: p_cam = R p_ref + t."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        K = _as_matrix(self.intrinsics, (3, 3))
        R = _as_matrix(self.rotation, (3, 3))
        t = _as_matrix(self.translation, (3,))
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if not (K[1, 0] == K[2, 0] == K[2, 1] == 0 and K[0, 0] > 0 and K[1, 1] > 0 and K[2, 2] == 1):
            raise ConfigError("intrinsics must be upper-triangular with positive focal lengths")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ConfigError("camera rotation is not orthonormal")

    def __eq__(self, other):
        return (isinstance(other, CameraModel) and self.image_size == other.image_size
                and np.array_equal(self.intrinsics, other.intrinsics)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    @property
    def center(self) -> np.ndarray:
        """Camera center in the reference frame."""
        return -self.rotation.T @ self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project (..., 3) reference-frame points. Returns uv (..., 2), depth (...), valid (...)."""
        pts = np.asarray(points, dtype=np.float64)
        cam = pts @ self.rotation.T + self.translation
        depth = cam[..., 2]
        safe = np.where(depth > DEPTH_EPS, depth, 1.0)
        pix = cam @ self.intrinsics.T
        uv = pix[..., :2] / safe[..., None]
        H, W = self.image_size
        valid = (depth > DEPTH_EPS) & (uv[..., 0] >= 0) & (uv[..., 0] < W) & (uv[..., 1] >= 0) & (uv[..., 1] < H)
        uv = np.where(valid[..., None], uv, INVALID_UV)
        return uv, depth, valid

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions (H, W, 3) through pixel centers, in the reference frame, and the origin."""
        H, W = self.image_size
        v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        dirs_cam = pix @ np.linalg.inv(self.intrinsics).T
        dirs = dirs_cam @ self.rotation  # R^T applied row-wise
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        return dirs, self.center


@dataclass(frozen=True, eq=False)
class EgoPose:
    """Rigid transform sensor(t) -> reference: p_ref = R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _as_matrix(self.rotation, (3, 3))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _as_matrix(self.translation, (3,)))
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ConfigError("pose rotation is not orthonormal")

    def __eq__(self, other):
        return (isinstance(other, EgoPose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def inverse(self) -> "EgoPose":
        return EgoPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "EgoPose") -> "EgoPose":
        """self ∘ other (apply ``other`` first)."""
        return EgoPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about the vertical (Y) axis; maps +Z to (sin yaw, 0, cos yaw)."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def align_points(points: np.ndarray, src: EgoPose, dst: EgoPose) -> np.ndarray:
    """Express points given in ``src``'s sensor frame in ``dst``'s frame (dst⁻¹ ∘ src)."""
    return dst.inverse().compose(src).apply(points)


@dataclass(frozen=True)
class HeightOffsetParams:
    y_gr: float
    y_drift: float
    ofst_min: float = -0.6
    ofst_max: float = 0.6

    def __post_init__(self):
        if not 0.0 <= float(self.y_drift) <= 1.0:
            raise ConfigError("y_drift must lie in [0, 1]")
        if not self.ofst_min < self.ofst_max:
            raise ConfigError("ofst_min must be < ofst_max")


def adjusted_ground_height(p: HeightOffsetParams):
    """Prior height shifted by the drift fraction of the allowed offset window."""
    return p.y_gr + p.ofst_min + p.y_drift * (p.ofst_max - p.ofst_min)


def project_grid_to_image(grid: BevGridSpec, heights, cam: CameraModel, stride: int = 1):
    """Project every BEV cell center at the given per-cell heights into ``cam``.

    ``heights`` is broadcastable to (..., Z/stride, X/stride) (leading dims are height
    layers). Returns ``uv`` (..., Z', X', 2) with ``INVALID_UV`` where invalid, and ``valid``.
    """
    zz, xx = grid.cell_centers(stride)
    heights = np.asarray(heights, dtype=np.float64)
    yy = np.broadcast_to(heights, np.broadcast_shapes(heights.shape, zz.shape))
    pts = np.stack(np.broadcast_arrays(xx, yy, zz), axis=-1)
    uv, _, valid = cam.project(pts)
    return uv, valid


def project_points_torch(points: torch.Tensor, K: torch.Tensor, R: torch.Tensor, t: torch.Tensor,
                         image_size: tuple[int, int]):
    """Batched projection used inside the network.

    points: (B, N, 3); K, R: (B, ncam, 3, 3); t: (B, ncam, 3).
    Returns uv (B, ncam, N, 2) with invalid entries set to ``INVALID_UV`` and valid (B, ncam, N).
    """
    cam = torch.einsum("bcij,bnj->bcni", R, points) + t[:, :, None, :]
    depth = cam[..., 2]
    ok_depth = depth > DEPTH_EPS
    safe = torch.where(ok_depth, depth, torch.ones_like(depth))
    pix = torch.einsum("bcij,bcnj->bcni", K, cam)
    uv = pix[..., :2] / safe[..., None]
    H, W = image_size
    valid = ok_depth & (uv[..., 0] >= 0) & (uv[..., 0] < W) & (uv[..., 1] >= 0) & (uv[..., 1] < H)
    uv = torch.where(valid[..., None], uv, torch.full_like(uv, INVALID_UV))
    return uv, valid


def range_interval_mask(grid: BevGridSpec, near_m: float, far_m: float) -> np.ndarray:
    """Cells whose ground distance from the ego origin lies in [near, far)."""
    if not 0 <= near_m < far_m:
        raise ValueError("need 0 <= near < far")
    zz, xx = grid.cell_centers()
    dist = np.hypot(zz, xx)
    return (dist >= near_m) & (dist < far_m)


def scaled_range_bins(grid: BevGridSpec, bins_m=((0, 20), (20, 35), (35, 50)), reference_m=50.0):
    """Rescale the benchmark's distance bins to this grid's half extent."""
    s = grid.max_range() / reference_m
    return [(lo * s, hi * s) for lo, hi in bins_m]


def make_camera_ring(n_cameras: int, image_size=(128, 192), hfov_deg=72.0, horizon_row_frac=0.25,
                     radius_m=1.0) -> list[CameraModel]:
    """Cameras on a ring around the ego center, camera 0 at the reference origin looking along +Z."""
    H, W = image_size
    f = (W / 2) / math.tan(math.radians(hfov_deg) / 2)
    K = np.array([[f, 0.0, W / 2], [0.0, f, H * horizon_row_frac], [0.0, 0.0, 1.0]])
    ego_center = np.array([0.0, 0.0, -radius_m])
    cams = []
    for i in range(n_cameras):
        yaw = 2 * math.pi * i / n_cameras
        c2r = yaw_rotation(yaw)
        center = ego_center + radius_m * np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        if i == 0:
            center = np.zeros(3)
        R = c2r.T
        cams.append(CameraModel(K, R, -R @ center, (H, W)))
    return cams


def camera_tensors(cams: Sequence[CameraModel], dtype=torch.float32):
    K = torch.tensor(np.stack([c.intrinsics for c in cams]), dtype=dtype)
    R = torch.tensor(np.stack([c.rotation for c in cams]), dtype=dtype)
    t = torch.tensor(np.stack([c.translation for c in cams]), dtype=dtype)
    return K, R, t


# -- calibration file ---------------------------------------------------------

def save_calibration(path: str | Path, cams: Sequence[CameraModel], poses: Sequence[EgoPose]) -> None:
    doc = {
        "cameras": [
            {
                "intrinsics": c.intrinsics.reshape(-1).tolist(),
                "rotation": c.rotation.reshape(-1).tolist(),
                "translation": c.translation.tolist(),
                "image_size": list(c.image_size),
            }
            for c in cams
        ],
        "ego_poses": [
            {"rotation": p.rotation.reshape(-1).tolist(), "translation": p.translation.tolist()}
            for p in poses
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_calibration(path: str | Path) -> tuple[list[CameraModel], list[EgoPose]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        cams = [CameraModel(c["intrinsics"], c["rotation"], c["translation"], tuple(c["image_size"]))
                for c in doc["cameras"]]
        poses = [EgoPose(p["rotation"], p["translation"]) for p in doc["ego_poses"]]
    except FileNotFoundError as e:
        raise FileNotFoundError(f"missing calibration file: {path}") from e
    except (KeyError, ValueError, TypeError) as e:
        raise ValueError(f"corrupt calibration file {path}: {e}") from e
    return cams, poses
