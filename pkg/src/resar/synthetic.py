"""Deterministic synthetic driving scenes: BEV masks, rendered camera views and radar sweeps.

The road layout is analytic in the ground plane (x lateral, z forward), so the
same description rasterizes the BEV ground truth and textures the ground hit by
each camera ray. Vehicles are oriented 3-D boxes standing on the ground.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import CLASS_NAMES, GridConfig, SceneConfig
from .geometry import (BevGridSpec, CameraModel, EgoPose, load_calibration, make_camera_ring,
                       save_calibration, yaw_rotation)

LANE_WIDTH_M = 3.5
DIVIDER_WIDTH_M = 0.6
WALKWAY_WIDTH_M = 2.5
CROSSING_DEPTH_M = 3.0
STOP_LINE_DEPTH_M = 0.6
EGO_BOX = ((-1.0, 1.0), (-3.2, 0.3))    # (x range, z range) occupied by the ego car
RADAR_COLUMNS = ("x", "y", "z", "vx", "vy", "rcs", "sweep_index")
CONDITION_PRESETS = {
    # brightness, contrast, noise sigma
    "sunny": (1.0, 1.0, 0.01),
    "rainy": (0.8, 0.7, 0.04),
    "night": (0.35, 0.8, 0.03),
}

DA, PED, WALK, STOP, ROAD_DIV, LANE_DIV, VEH = range(len(CLASS_NAMES))


@dataclass
class Vehicle:
    x: float
    z: float
    yaw: float              # heading; the length axis points along (sin yaw, cos yaw) in (x, z)
    length: float
    width: float
    height: float
    vx: float = 0.0         # ground velocity in the reference frame (m/s)
    vz: float = 0.0
    color: tuple[float, float, float] = (0.7, 0.1, 0.1)

    def local(self, x, z):
        """(along, across) coordinates of ground points in the vehicle frame."""
        dx, dz = np.asarray(x) - self.x, np.asarray(z) - self.z
        s, c = math.sin(self.yaw), math.cos(self.yaw)
        return dx * s + dz * c, dx * c - dz * s

    def contains(self, x, z, shrink: float = 1.0):
        a, b = self.local(x, z)
        return (np.abs(a) <= shrink * self.length / 2) & (np.abs(b) <= shrink * self.width / 2)

    def corners(self) -> np.ndarray:
        s, c = math.sin(self.yaw), math.cos(self.yaw)
        along, across = np.array([s, c]), np.array([c, -s])
        out = [np.array([self.x, self.z]) + i * along * self.length / 2 + j * across * self.width / 2
               for i, j in ((1, 1), (1, -1), (-1, -1), (-1, 1))]
        return np.stack(out)


@dataclass
class RoadLayout:
    n_left: int                     # opposite-direction lanes
    n_right: int                    # ego-direction lanes
    x0: float                       # centreline lateral offset at z = 0
    curvature: float
    walkway_left: bool
    walkway_right: bool
    intersection: tuple[float, float] | None = None   # (z centre, width) of the cross street
    crossing: tuple[float, float] | None = None       # [z0, z1) band across the main road
    stop_line: tuple[float, float] | None = None      # [z0, z1) band across ego-direction lanes

    @property
    def left_edge(self) -> float:
        return -self.n_left * LANE_WIDTH_M

    @property
    def right_edge(self) -> float:
        return self.n_right * LANE_WIDTH_M

    def lateral(self, x, z):
        return np.asarray(x) - (self.x0 + 0.5 * self.curvature * np.asarray(z) ** 2)

    def heading(self, z: float) -> float:
        return math.atan(self.curvature * z)

    def lane_center(self, lane: int, z: float) -> float:
        """x of lane ``lane`` (negative indices: opposite lanes, -1 nearest the centre)."""
        return self.x0 + 0.5 * self.curvature * z ** 2 + (lane + 0.5) * LANE_WIDTH_M

    def masks(self, x, z) -> np.ndarray:
        """Boolean (7, *shape) class membership of ground points."""
        x, z = np.broadcast_arrays(np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64))
        s = self.lateral(x, z)
        out = np.zeros((len(CLASS_NAMES),) + x.shape, dtype=bool)
        on_main = (s >= self.left_edge) & (s < self.right_edge)
        in_cross = np.zeros_like(on_main)
        if self.intersection is not None:
            zi, wi = self.intersection
            in_cross = np.abs(z - zi) < wi / 2
        out[DA] = on_main | in_cross
        half = DIVIDER_WIDTH_M / 2
        if self.n_left and self.n_right:
            out[ROAD_DIV] = (np.abs(s) < half) & ~in_cross
        lane_div = np.zeros_like(on_main)
        for k in list(range(1, self.n_right)) + [-k for k in range(1, self.n_left)]:
            lane_div |= np.abs(s - k * LANE_WIDTH_M) < half
        out[LANE_DIV] = lane_div & ~in_cross
        walk = np.zeros_like(on_main)
        if self.walkway_right:
            walk |= (s >= self.right_edge) & (s < self.right_edge + WALKWAY_WIDTH_M)
        if self.walkway_left:
            walk |= (s < self.left_edge) & (s >= self.left_edge - WALKWAY_WIDTH_M)
        walk &= ~in_cross
        if self.intersection is not None:
            zi, wi = self.intersection
            beside = (np.abs(z - zi) >= wi / 2) & (np.abs(z - zi) < wi / 2 + WALKWAY_WIDTH_M)
            off_main = (s < self.left_edge - WALKWAY_WIDTH_M) | (s >= self.right_edge + WALKWAY_WIDTH_M)
            walk |= beside & off_main
            out[ROAD_DIV] |= (np.abs(z - zi) < half) & ~on_main
        out[WALK] = walk
        if self.crossing is not None:
            c0, c1 = self.crossing
            out[PED] = on_main & (z >= c0) & (z < c1)
        if self.stop_line is not None:
            t0, t1 = self.stop_line
            out[STOP] = (s >= 0) & (s < self.right_edge) & (z >= t0) & (z < t1)
        return out


@dataclass
class SceneSpec:
    seed: int
    lanes: int = 2
    ego_lane: int = 0
    x0: float = 0.0
    curvature: float = 0.0
    n_vehicles: int = 0
    vehicle_length_m: tuple[float, float] = (3.8, 5.0)
    vehicle_width_m: tuple[float, float] = (1.7, 2.0)
    vehicle_height_m: tuple[float, float] = (1.4, 1.8)
    crossing_density: float = 0.8
    walkway_density: float = 0.8
    stop_line_density: float = 0.7
    intersection_prob: float = 0.4
    ego_speed_mps: float = 0.0
    ego_yaw_rate: float = 0.0
    sweep_dt_s: float = 0.05
    n_sweeps: int = 6
    clutter_points: int = 20
    condition: str = "sunny"
    vehicles: list[Vehicle] | None = None     # explicit placement overrides n_vehicles

    def __post_init__(self):
        for name in ("crossing_density", "walkway_density", "stop_line_density", "intersection_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lanes < 1 or self.n_vehicles < 0 or self.n_sweeps < 1:
            raise ValueError("lanes >= 1, n_vehicles >= 0 and n_sweeps >= 1 required")
        if self.condition not in CONDITION_PRESETS:
            raise ValueError(f"unknown condition {self.condition!r}")

    @classmethod
    def from_config(cls, cfg: SceneConfig, seed: int) -> "SceneSpec":
        rng = np.random.default_rng([seed, 1])
        lanes = int(rng.integers(cfg.lanes[0], cfg.lanes[1] + 1))
        n_right = lanes - lanes // 2
        return cls(
            seed=seed,
            lanes=lanes,
            ego_lane=int(rng.integers(0, n_right)),
            curvature=float(rng.uniform(*cfg.curvature)),
            n_vehicles=int(rng.integers(cfg.vehicles[0], cfg.vehicles[1] + 1)),
            vehicle_length_m=tuple(cfg.vehicle_length_m),
            vehicle_width_m=tuple(cfg.vehicle_width_m),
            vehicle_height_m=tuple(cfg.vehicle_height_m),
            crossing_density=cfg.crossing_density,
            walkway_density=cfg.walkway_density,
            stop_line_density=cfg.stop_line_density,
            intersection_prob=cfg.intersection_prob,
            ego_speed_mps=float(rng.uniform(*cfg.ego_speed_mps)),
            ego_yaw_rate=float(rng.uniform(-0.1, 0.1)),
            sweep_dt_s=cfg.sweep_dt_s,
            n_sweeps=cfg.n_sweeps,
            clutter_points=cfg.clutter_points,
            condition=str(cfg.conditions[int(rng.integers(len(cfg.conditions)))]),
        )


@dataclass(eq=False)
class Sample:
    gt: np.ndarray                  # (7, Z, X) uint8 in {0, 1}
    images: np.ndarray              # (ncam, 3, H, W) uint8
    radar: np.ndarray               # (M, 7) float64, points in their sweep's sensor frame
    cameras: list[CameraModel]
    ego_poses: list[EgoPose]        # sweep sensor frame -> current reference frame
    meta: dict
    vehicle_ids: np.ndarray | None = field(default=None, repr=False)   # (ncam, H, W) render aux, not stored

    def __eq__(self, other):
        return (isinstance(other, Sample) and np.array_equal(self.gt, other.gt)
                and np.array_equal(self.images, other.images)
                and self.radar.shape == other.radar.shape and np.array_equal(self.radar, other.radar)
                and self.cameras == other.cameras and self.ego_poses == other.ego_poses
                and self.meta == other.meta)

    @property
    def radar_source(self) -> np.ndarray:
        """Vehicle index per radar row, -1 for clutter."""
        return np.asarray(self.meta["radar_source"], dtype=np.int64)

    def vehicles(self) -> list[Vehicle]:
        return [Vehicle(**{**v, "color": tuple(v["color"])}) for v in self.meta["vehicles"]]


# -- layout -------------------------------------------------------------------

def _chance(rng, p: float) -> bool:
    return bool(rng.random() < min(p, 1.0))


def build_layout(spec: SceneSpec, rng) -> RoadLayout:
    n_left = spec.lanes // 2
    n_right = spec.lanes - n_left
    lane = min(spec.ego_lane, n_right - 1)
    layout = RoadLayout(n_left, n_right, x0=-(lane + 0.5) * LANE_WIDTH_M + spec.x0, curvature=spec.curvature,
                        walkway_left=_chance(rng, spec.walkway_density),
                        walkway_right=_chance(rng, spec.walkway_density))
    has_cross = _chance(rng, spec.intersection_prob)
    if has_cross:
        zi = float(rng.uniform(6.0, 12.0))
        layout.intersection = (zi, 2 * LANE_WIDTH_M)
    if _chance(rng, spec.crossing_density):
        if has_cross:
            c1 = layout.intersection[0] - layout.intersection[1] / 2 - 0.5
        else:
            c1 = float(rng.uniform(-8.0, 13.0))
        layout.crossing = (c1 - CROSSING_DEPTH_M, c1)
    if _chance(rng, spec.stop_line_density) and (layout.crossing or layout.intersection):
        front = layout.crossing[0] if layout.crossing else layout.intersection[0] - layout.intersection[1] / 2
        layout.stop_line = (front - 1.0 - STOP_LINE_DEPTH_M, front - 1.0)
    return layout


def check_vehicles_in_grid(vehicles, grid: BevGridSpec) -> None:
    for i, v in enumerate(vehicles):
        c = v.corners()
        inside = ((c[:, 0] >= grid.x_extent_m[0]) & (c[:, 0] <= grid.x_extent_m[1])
                  & (c[:, 1] >= grid.z_extent_m[0]) & (c[:, 1] <= grid.z_extent_m[1]))
        if not inside.all():
            raise ValueError(f"vehicle {i} at ({v.x:.2f}, {v.z:.2f}) extends outside the BEV grid")


def place_vehicles(spec: SceneSpec, layout: RoadLayout, grid: BevGridSpec, rng) -> list[Vehicle]:
    lanes = list(range(layout.n_right)) + [-k for k in range(1, layout.n_left + 1)]
    margin = 0.5
    zmin, zmax = grid.z_extent_m[0] + 3.0, grid.z_extent_m[1] - 3.0
    placed: list[tuple[int, Vehicle]] = []
    attempts = 0
    while len(placed) < spec.n_vehicles and attempts < 200 * max(spec.n_vehicles, 1):
        attempts += 1
        lane = lanes[int(rng.integers(len(lanes)))]
        z = float(rng.uniform(zmin, zmax))
        length = float(rng.uniform(*spec.vehicle_length_m))
        width = float(rng.uniform(*spec.vehicle_width_m))
        height = float(rng.uniform(*spec.vehicle_height_m))
        forward = lane >= 0
        yaw = layout.heading(z) + (0.0 if forward else math.pi)
        speed = float(rng.uniform(0.0, 12.0))
        color = tuple(float(c) for c in rng.uniform(0.15, 0.95, 3))
        v = Vehicle(layout.lane_center(lane, z), z, yaw, length, width, height,
                    speed * math.sin(yaw), speed * math.cos(yaw), color)
        c = v.corners()
        if (np.abs(c[:, 0] - 0.5 * sum(grid.x_extent_m)) > (grid.x_extent_m[1] - grid.x_extent_m[0]) / 2 - margin).any():
            continue
        if not layout.masks(c[:, 0], c[:, 1])[DA].all():
            continue
        (ex0, ex1), (ez0, ez1) = EGO_BOX
        if ((c[:, 0].min() < ex1 + 0.5) and (c[:, 0].max() > ex0 - 0.5)
                and (c[:, 1].min() < ez1 + 3.0) and (c[:, 1].max() > ez0 - 1.0)):
            continue
        if any(l == lane and abs(o.z - z) < (o.length + length) / 2 + 1.0 for l, o in placed):
            continue
        placed.append((lane, v))
    return [v for _, v in placed]


def rasterize(layout: RoadLayout, vehicles, grid: BevGridSpec) -> np.ndarray:
    zz, xx = grid.cell_centers()
    gt = layout.masks(xx, zz)
    gt[VEH] = False
    for v in vehicles:
        gt[VEH] |= v.contains(xx, zz)
    return gt.astype(np.uint8)


# -- rendering ----------------------------------------------------------------

_GROUND_COLORS = {
    "grass": (0.33, 0.42, 0.24),
    DA: (0.30, 0.30, 0.32),
    WALK: (0.66, 0.63, 0.58),
    PED: (0.88, 0.88, 0.86),
    STOP: (0.95, 0.95, 0.95),
    ROAD_DIV: (0.92, 0.78, 0.18),
    LANE_DIV: (0.90, 0.90, 0.90),
}
_SKY = np.array([0.55, 0.70, 0.90])


def _hash_noise(ix, iz, salt: int) -> np.ndarray:
    v = np.sin(ix * 12.9898 + iz * 78.233 + salt * 37.719) * 43758.5453
    return v - np.floor(v)


def ground_color(layout: RoadLayout, x, z, salt: int) -> np.ndarray:
    m = layout.masks(x, z)
    col = np.empty(x.shape + (3,))
    col[:] = _GROUND_COLORS["grass"]
    for cls in (WALK, DA, LANE_DIV, ROAD_DIV, STOP):
        col[m[cls]] = _GROUND_COLORS[cls]
    # zebra stripes: paint every other metre across the road
    s = layout.lateral(x, z)
    stripe = m[PED] & (np.floor(s) % 2 == 0)
    col[stripe] = _GROUND_COLORS[PED]
    tex = _hash_noise(np.floor(x * 4), np.floor(z * 4), salt)
    return col * (0.9 + 0.2 * tex[..., None])


def _ray_box(origin, dirs, v: Vehicle, ground_y: float):
    """Slab intersection of rays with the vehicle box. Returns hit distance (inf = miss) and face id."""
    s, c = math.sin(v.yaw), math.cos(v.yaw)
    axes = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])   # across, vertical, along
    center = np.array([v.x, ground_y - v.height / 2, v.z])
    half = np.array([v.width / 2, v.height / 2, v.length / 2])
    o = axes @ (origin - center)
    d = dirs @ axes.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    near = tmin.max(-1)
    far = tmax.min(-1)
    hit = (near <= far) & (near > 1e-6)
    return np.where(hit, near, np.inf), tmin.argmax(-1)


def render_camera(cam: CameraModel, layout: RoadLayout, vehicles, ground_y: float, salt: int):
    """Ray-cast one view. Returns float RGB (H, W, 3) in [0, 1] and the vehicle-id buffer (-1 = none)."""
    dirs, origin = cam.pixel_rays()
    H, W = cam.image_size
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[..., 1] > 1e-6, (ground_y - origin[1]) / dirs[..., 1], np.inf)
    best = t_ground.copy()
    ids = np.full((H, W), -1, dtype=np.int16)
    faces = np.zeros((H, W), dtype=np.int64)
    for i, v in enumerate(vehicles):
        t, face = _ray_box(origin, dirs, v, ground_y)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = i
        faces[closer] = face[closer]
    img = np.empty((H, W, 3))
    sky = ~np.isfinite(best)
    rows = (np.arange(H)[:, None] / H) * np.ones((1, W))
    img[sky] = _SKY * (0.85 + 0.15 * rows[sky, None])
    ground = np.isfinite(best) & (ids < 0)
    p = origin + dirs[ground] * best[ground][:, None]
    img[ground] = ground_color(layout, p[:, 0], p[:, 2], salt)
    shade = np.array([0.75, 1.0, 0.9])   # across faces, roof, front/back
    for i, v in enumerate(vehicles):
        m = ids == i
        if m.any():
            img[m] = np.asarray(v.color) * shade[faces[m]][:, None]
    return np.clip(img, 0.0, 1.0), ids


def apply_condition(img: np.ndarray, condition: str, rng) -> np.ndarray:
    brightness, contrast, sigma = CONDITION_PRESETS[condition]
    out = ((img - 0.5) * contrast + 0.5) * brightness
    out = out + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)


# -- radar --------------------------------------------------------------------

def ego_poses(spec: SceneSpec) -> list[EgoPose]:
    """Sweep k was captured k·dt seconds ago; its sensor frame expressed in the current frame."""
    poses = []
    for k in range(spec.n_sweeps):
        tau = -k * spec.sweep_dt_s
        yaw = spec.ego_yaw_rate * tau
        dist = spec.ego_speed_mps * tau
        t = np.array([dist * math.sin(yaw / 2), 0.0, dist * math.cos(yaw / 2)])
        poses.append(EgoPose(yaw_rotation(yaw), t))
    return poses


def _radial(vel_xz: np.ndarray, pos_xz: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(pos_xz, axis=-1, keepdims=True)
    unit = pos_xz / np.maximum(r, 1e-6)
    return (vel_xz * unit).sum(-1, keepdims=True) * unit


def simulate_radar(spec: SceneSpec, vehicles, poses, grid: BevGridSpec, ground_y: float, rng):
    """Points (x, y, z, vx, vy, rcs, sweep) in each sweep's sensor frame, plus per-row vehicle index.

    Returns come from each vehicle's current footprint (object motion is carried by the
    velocity features only); ego motion between sweeps is applied through the poses.
    """
    ego_vel = np.array([0.0, spec.ego_speed_mps])
    rows, sources = [], []
    for k, pose in enumerate(poses):
        sweep = []
        for i, v in enumerate(vehicles):
            n = 1 + int(rng.poisson(3.0))
            a = rng.uniform(-0.45, 0.45, n) * v.length
            b = rng.uniform(-0.45, 0.45, n) * v.width
            s, c = math.sin(v.yaw), math.cos(v.yaw)
            x = v.x + a * s + b * c
            z = v.z + a * c - b * s
            y = ground_y - rng.uniform(0.2, min(0.7, v.height), n)
            rel = _radial(np.array([v.vx, v.vz]) - ego_vel, np.stack([x, z], -1))
            rcs = 10.0 * math.log10(v.length * v.width * v.height) + rng.normal(0.0, 1.0, n)
            sweep.append(np.column_stack([x, y, z, rel, rcs, np.full(n, k)]))
            sources += [i] * n
        m = spec.clutter_points
        x = rng.uniform(*grid.x_extent_m, m)
        z = rng.uniform(*grid.z_extent_m, m)
        y = ground_y - rng.uniform(0.1, 0.6, m)
        rel = _radial(-np.broadcast_to(ego_vel, (m, 2)), np.stack([x, z], -1))
        sweep.append(np.column_stack([x, y, z, rel, rng.uniform(-5.0, 5.0, m), np.full(m, k)]))
        sources += [-1] * m
        # express the sweep in its own sensor frame
        rows.append(_to_sensor(np.concatenate(sweep), pose.inverse()))
    table = np.concatenate(rows) if rows else np.zeros((0, len(RADAR_COLUMNS)))
    return table, np.asarray(sources, dtype=np.int64)


def _to_sensor(block: np.ndarray, inv: EgoPose) -> np.ndarray:
    out = block.copy()
    out[:, :3] = inv.apply(block[:, :3])
    vel = np.column_stack([block[:, 3], np.zeros(len(block)), block[:, 4]]) @ inv.rotation.T
    out[:, 3], out[:, 4] = vel[:, 0], vel[:, 2]
    return out


# -- generation -----------------------------------------------------------------

def generate(spec: SceneSpec, grid: BevGridSpec | None = None, scene_cfg: SceneConfig | None = None) -> Sample:
    grid = grid or BevGridSpec()
    scene_cfg = scene_cfg or SceneConfig()
    rng = np.random.default_rng([spec.seed, 2])
    ground_y = scene_cfg.camera_height_m
    layout = build_layout(spec, rng)
    if spec.vehicles is not None:
        vehicles = list(spec.vehicles)
        check_vehicles_in_grid(vehicles, grid)
    else:
        vehicles = place_vehicles(spec, layout, grid, rng)
    gt = rasterize(layout, vehicles, grid)
    cams = make_camera_ring(scene_cfg.n_cameras, scene_cfg.image_size, scene_cfg.camera_hfov_deg,
                            scene_cfg.horizon_row_frac)
    salt = int(rng.integers(1 << 16))
    images, ids = [], []
    for cam in cams:
        img, vid = render_camera(cam, layout, vehicles, ground_y, salt)
        images.append(apply_condition(img, spec.condition, rng).transpose(2, 0, 1))
        ids.append(vid)
    poses = ego_poses(spec)
    radar, sources = simulate_radar(spec, vehicles, poses, grid, ground_y, rng)
    meta = {
        "seed": int(spec.seed),
        "condition": spec.condition,
        "vehicles": [{**asdict(v), "color": list(v.color)} for v in vehicles],
        "radar_source": sources.tolist(),
        "ego": {"speed_mps": spec.ego_speed_mps, "yaw_rate": spec.ego_yaw_rate},
        "layout": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(layout).items()},
    }
    return Sample(gt, np.stack(images), radar, cams, poses, meta, np.stack(ids))


def scene_masks(spec: SceneSpec, grid: BevGridSpec | None = None) -> np.ndarray:
    """The (C, Z, X) ground truth of ``generate(spec)`` without rendering sensors."""
    grid = grid or BevGridSpec()
    rng = np.random.default_rng([spec.seed, 2])
    layout = build_layout(spec, rng)
    if spec.vehicles is not None:
        check_vehicles_in_grid(spec.vehicles, grid)
        return rasterize(layout, list(spec.vehicles), grid)
    return rasterize(layout, place_vehicles(spec, layout, grid, rng), grid)


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# -- on-disk format -------------------------------------------------------------

def write_sample(sample: Sample, directory: str | Path) -> Path:
    d = Path(directory)
    (d / "gt").mkdir(parents=True, exist_ok=True)
    for k in range(sample.gt.shape[0]):
        Image.fromarray((sample.gt[k] * 255).astype(np.uint8), mode="L").save(d / "gt" / f"class_{k}.png")
    for i, img in enumerate(sample.images):
        Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0)), mode="RGB").save(d / f"cam_{i}.png")
    with open(d / "radar.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RADAR_COLUMNS)
        for row in sample.radar:
            w.writerow([format(float(v), ".17g") for v in row])
    save_calibration(d / "calibration.json", sample.cameras, sample.ego_poses)
    (d / "meta.json").write_text(json.dumps(sample.meta))
    return d


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"sample is missing {path.name}: {path}")
    return path


def read_sample(directory: str | Path, num_classes: int = len(CLASS_NAMES)) -> Sample:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"sample directory not found: {d}")
    cams, poses = load_calibration(_need(d / "calibration.json"))
    try:
        meta = json.loads(_need(d / "meta.json").read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt meta.json in {d}: {e}") from e
    gt = []
    for k in range(num_classes):
        arr = _load_png(_need(d / "gt" / f"class_{k}.png"))
        if not np.isin(arr, (0, 255)).all():
            raise ValueError(f"{d / 'gt' / f'class_{k}.png'} holds values other than 0/255")
        gt.append(arr // 255)
    images = [_load_png(_need(d / f"cam_{i}.png")).transpose(2, 0, 1) for i in range(len(cams))]
    path = _need(d / "radar.csv")
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != RADAR_COLUMNS:
                raise ValueError(f"unexpected header {header}")
            rows = [[float(v) for v in row] for row in reader]
    except (ValueError, StopIteration) as e:
        raise ValueError(f"corrupt radar.csv in {d}: {e}") from e
    radar = np.asarray(rows, dtype=np.float64).reshape(-1, len(RADAR_COLUMNS))
    return Sample(np.stack(gt).astype(np.uint8), np.stack(images), radar, cams, poses, meta)


def _load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im).copy()
    except OSError as e:
        raise ValueError(f"corrupt image {path}: {e}") from e


# -- datasets -------------------------------------------------------------------

def class_frequencies(masks) -> np.ndarray:
    """Fraction of cells set per class over a stack of (C, Z, X) masks."""
    masks = np.asarray(masks)
    if masks.ndim == 3:
        masks = masks[None]
    return masks.astype(np.float64).mean(axis=(0, 2, 3))


def generate_dataset(out_dir: str | Path, count: int, seed: int, scene_cfg: SceneConfig | None = None,
                     grid_cfg: GridConfig | None = None, val_count: int | None = None) -> dict:
    """Write ``count`` samples plus ``index.json``; the last ``val_count`` samples form the val split."""
    scene_cfg = scene_cfg or SceneConfig()
    grid = BevGridSpec.from_config(grid_cfg or GridConfig())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if val_count is None:
        val_count = count // 5
    if not 0 <= val_count <= count:
        raise ValueError("val_count must lie in [0, count]")
    entries, train_masks = [], []
    for i in range(count):
        s = sample_seed(seed, i)
        sample = generate(SceneSpec.from_config(scene_cfg, s), grid, scene_cfg)
        name = f"sample_{i:05d}"
        write_sample(sample, out / name)
        split = "train" if i < count - val_count else "val"
        entries.append({"path": name, "split": split, "seed": s, "condition": sample.meta["condition"]})
        if split == "train":
            train_masks.append(sample.gt)
    freqs = class_frequencies(np.stack(train_masks)) if train_masks else np.zeros(len(CLASS_NAMES))
    index = {
        "seed": seed,
        "class_names": list(CLASS_NAMES),
        "class_frequency": freqs.tolist(),
        "samples": entries,
    }
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return index


def read_index(root: str | Path) -> dict:
    path = Path(root) / "index.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset index not found: {path}")
    return json.loads(path.read_text())
