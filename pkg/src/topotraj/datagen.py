"""Procedural driving scenes: a curvy road, a LiDAR-like ground scan, the
recorded trajectory along the road, and a hand-click-style noisy map.

Coordinates in ``scene.json`` are planar meters; the point cloud is stored
in the ego/sensor frame (what a LiDAR delivers).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .raster import GridSpec, PointCloud, read_tpc, write_tpc
from .topomap import EgoPose, TopometricMap, densify_map

SPLIT_OFFSETS = {"train": 0, "test": 1_000_000_000}
MAX_SAMPLES_PER_SEED = 100_000
_STEP = 0.25  # centerline integration step, meters


@dataclass
class DatagenParams:
    road_width: float = 6.0
    curvature_max: float = 0.05
    road_length: float = 200.0
    click_spacing: float = 25.0
    click_sagitta: float = 0.25
    map_noise: float = 1.0
    densify_spacing: float = 1.0
    cloud_points: int = 24000
    offroad_z_sigma: float = 0.3
    sensor_height: float = 1.73
    waypoint_spacing: float = 2.0
    num_waypoints: int = 12
    past_length: int = 5
    lateral_jitter: float = 0.5
    heading_jitter_deg: float = 5.0

    def validate(self) -> None:
        if self.road_width <= 0:
            raise ValueError(f"road_width must be positive, got {self.road_width}")
        if self.curvature_max < 0:
            raise ValueError(f"curvature_max must be >= 0, got {self.curvature_max}")
        if self.road_length < 120:
            raise ValueError(f"road_length must be at least 120 m, got {self.road_length}")
        if self.click_spacing <= 0 or self.click_sagitta <= 0 or self.densify_spacing <= 0:
            raise ValueError("click_spacing, click_sagitta and densify_spacing must be positive")
        if self.map_noise < 0 or self.lateral_jitter < 0 or self.heading_jitter_deg < 0:
            raise ValueError("noise levels must be >= 0")
        if self.cloud_points < 0 or self.offroad_z_sigma < 0:
            raise ValueError("cloud_points and offroad_z_sigma must be >= 0")
        if self.waypoint_spacing <= 0 or self.num_waypoints < 2 or self.past_length < 2:
            raise ValueError("need waypoint_spacing > 0, num_waypoints >= 2, past_length >= 2")
        ahead = self.waypoint_spacing * self.num_waypoints
        behind = self.waypoint_spacing * (self.past_length - 1)
        if ahead + behind + 80.0 > self.road_length:
            raise ValueError("road_length too short for the trajectory horizon")

    @property
    def map_bound(self) -> float:
        """Upper bound on the distance from any map point to the true centerline."""
        return self.map_noise + self.click_sagitta

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "DatagenParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d or {}) - names
        if unknown:
            raise ValueError(f"unknown datagen parameters: {sorted(unknown)}")
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneSample:
    cloud: PointCloud
    pose: EgoPose
    map: TopometricMap
    gt_trajectory: np.ndarray   # (T, 2) planar
    past_trajectory: np.ndarray  # (P, 2) planar, last entry at the ego time step
    scene_id: str
    seed: int
    centerline: Optional[np.ndarray] = None  # (M, 2) planar; not persisted
    road_label: Optional[np.ndarray] = None  # per-point bool; not persisted

    def gt_ego(self) -> np.ndarray:
        return self.pose.to_ego(self.gt_trajectory)

    def past_ego(self) -> np.ndarray:
        return self.pose.to_ego(self.past_trajectory)


# ------------------------------------------------------------------ geometry


def _centerline(rng: np.random.Generator, p: DatagenParams) -> np.ndarray:
    n = int(math.ceil(p.road_length / _STEP)) + 1
    kappa = np.empty(n - 1)
    i = 0
    while i < n - 1:
        run = int(rng.uniform(15.0, 40.0) / _STEP)
        kappa[i:i + run] = rng.uniform(-p.curvature_max, p.curvature_max)
        i += run
    heading0 = rng.uniform(-math.pi, math.pi)
    heading = heading0 + np.concatenate([[0.0], np.cumsum(kappa * _STEP)])
    start = rng.uniform(-500.0, 500.0, size=2)
    mid = 0.5 * (heading[:-1] + heading[1:])
    steps = _STEP * np.stack([np.cos(mid), np.sin(mid)], axis=1)
    return start + np.concatenate([[[0.0, 0.0]], np.cumsum(steps, axis=0)])


def _at(line: np.ndarray, s) -> np.ndarray:
    """Point(s) at arc length ``s`` on a uniformly stepped centerline."""
    s = np.asarray(s, dtype=np.float64)
    idx = s / _STEP
    i0 = np.clip(np.floor(idx).astype(int), 0, line.shape[0] - 2)
    t = (idx - i0)[..., None]
    return line[i0] * (1 - t) + line[i0 + 1] * t


def _tangent(line: np.ndarray, s: float) -> float:
    i = min(int(s / _STEP), line.shape[0] - 2)
    d = line[i + 1] - line[i]
    return math.atan2(d[1], d[0])


def _sagitta(line: np.ndarray, i: int, j: int) -> float:
    a, b = line[i], line[j]
    ab = b - a
    L = np.linalg.norm(ab)
    pts = line[i:j + 1] - a
    return float(np.max(np.abs(pts[:, 0] * ab[1] - pts[:, 1] * ab[0]) / L))


def click_points(line: np.ndarray, spacing: float, sagitta: float) -> np.ndarray:
    """Sparse 'clicked' vertices: at most ``spacing`` apart, placed closer on
    bends so each chord stays within ``sagitta`` of the curve."""
    step = max(1, int(round(spacing / _STEP)))
    idx = [0]
    last = line.shape[0] - 1
    while idx[-1] < last:
        i = idx[-1]
        j = min(i + step, last)
        while j > i + 1 and _sagitta(line, i, j) > sagitta:
            j -= max(1, (j - i) // 8)
        idx.append(j)
    return line[idx]


def distance_to_polyline(pts: np.ndarray, line: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact Euclidean distance from each point to a polyline."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    out = np.empty(pts.shape[0])
    for k in range(0, pts.shape[0], chunk):
        out[k:k + chunk] = _seg_distance(pts[k:k + chunk], line[:-1], line[1:])
    return out


def within_polyline(pts: np.ndarray, line: np.ndarray, radius: float, tile: float = 8.0) -> np.ndarray:
    """``distance_to_polyline(pts, line) < radius``, evaluated per square
    tile against only the segments whose bounding box reaches it."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    a, b = line[:-1], line[1:]
    lo, hi = np.minimum(a, b) - radius, np.maximum(a, b) + radius
    key = np.floor(pts / tile).astype(np.int64)
    out = np.zeros(pts.shape[0], dtype=bool)
    order = np.lexsort((key[:, 1], key[:, 0]))
    _, starts = np.unique(key[order], axis=0, return_index=True)
    for idx in np.split(order, starts[1:]):
        t0 = key[idx[0]] * tile
        sel = np.all((hi >= t0) & (lo <= t0 + tile), axis=1)
        if sel.any():
            out[idx] = _seg_distance(pts[idx], a[sel], b[sel]) < radius
    return out


def _seg_distance(pts, a, b):
    ab = b - a
    L2 = np.maximum((ab * ab).sum(axis=1), 1e-300)
    p = pts[:, None, :]
    t = np.clip(((p - a) * ab).sum(axis=2) / L2, 0.0, 1.0)
    d = p - (a + t[..., None] * ab)
    return np.sqrt((d * d).sum(axis=2).min(axis=1))


# -------------------------------------------------------------------- scenes


def generate_scene(seed: int, params: Optional[DatagenParams] = None, grid: Optional[GridSpec] = None,
                   scene_id: Optional[str] = None) -> SceneSample:
    p = params or DatagenParams()
    p.validate()
    grid = grid or GridSpec()
    rng = np.random.default_rng(seed)
    line = _centerline(rng, p)

    behind = p.waypoint_spacing * (p.past_length - 1)
    ahead = p.waypoint_spacing * p.num_waypoints
    s_lo = max(behind, 20.0) + 20.0
    s_hi = p.road_length - ahead - 40.0
    s0 = float(rng.uniform(s_lo, max(s_lo, s_hi)))

    tangent = _tangent(line, s0)
    normal = np.array([-math.sin(tangent), math.cos(tangent)])
    ego_xy = _at(line, s0) + rng.uniform(-p.lateral_jitter, p.lateral_jitter) * normal
    heading = tangent + math.radians(rng.uniform(-p.heading_jitter_deg, p.heading_jitter_deg))
    pose = EgoPose(float(ego_xy[0]), float(ego_xy[1]), heading)

    gt = _at(line, s0 + p.waypoint_spacing * np.arange(1, p.num_waypoints + 1))
    past = _at(line, s0 - p.waypoint_spacing * np.arange(p.past_length - 1, -1, -1))

    # ground scan over the grid footprint, in the sensor frame
    x0, x1, y0, y1 = grid.extent
    n = p.cloud_points
    local = np.stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)], axis=1)
    world = pose.to_world(local)
    near = np.all(np.abs(line - pose.position) <= max(x1 - x0, y1 - y0) + p.road_width, axis=1)
    seg = line[near] if near.sum() >= 2 else line
    on_road = within_polyline(world, seg, p.road_width / 2.0)
    z = np.where(on_road,
                 rng.normal(0.0, 0.02, n),
                 rng.normal(0.0, p.offroad_z_sigma, n)) - p.sensor_height
    intensity = np.where(on_road, rng.uniform(0.55, 1.0, n), rng.uniform(0.0, 0.45, n))
    cloud = PointCloud(np.column_stack([local, z, intensity]))

    clicks = click_points(line, p.click_spacing, p.click_sagitta)
    r = p.map_noise * np.sqrt(rng.uniform(0.0, 1.0, clicks.shape[0]))
    ang = rng.uniform(-math.pi, math.pi, clicks.shape[0])
    noisy = clicks + np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    topo = densify_map(TopometricMap.from_polyline(noisy), p.densify_spacing)

    return SceneSample(cloud=cloud, pose=pose, map=topo, gt_trajectory=gt, past_trajectory=past,
                       scene_id=scene_id or f"scene-{seed}", seed=seed, centerline=line, road_label=on_road)


# ------------------------------------------------------------------- on disk


def sample_seed(split: str, seed: int, index: int) -> int:
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_OFFSETS)}")
    if not 0 <= index < MAX_SAMPLES_PER_SEED:
        raise ValueError(f"sample index {index} outside [0, {MAX_SAMPLES_PER_SEED})")
    return SPLIT_OFFSETS[split] + seed * MAX_SAMPLES_PER_SEED + index


def scene_to_json(s: SceneSample) -> dict:
    return {
        "scene_id": s.scene_id,
        "seed": s.seed,
        "pose": s.pose.to_dict(),
        "map": s.map.to_json(),
        "gt_trajectory": s.gt_trajectory.tolist(),
        "past_trajectory": s.past_trajectory.tolist(),
    }


def write_scene(directory, s: SceneSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tpc(d / "cloud.tpc", s.cloud)
    (d / "scene.json").write_text(json.dumps(scene_to_json(s), sort_keys=True))


def read_scene(directory) -> SceneSample:
    d = Path(directory)
    doc = json.loads((d / "scene.json").read_text())
    pose = EgoPose(**doc["pose"])
    past = doc.get("past_trajectory")
    return SceneSample(
        cloud=read_tpc(d / "cloud.tpc"),
        pose=pose,
        map=TopometricMap.from_json(doc["map"]),
        gt_trajectory=np.asarray(doc["gt_trajectory"], dtype=np.float64).reshape(-1, 2),
        past_trajectory=np.asarray(past if past else [[pose.x, pose.y]] * 2, dtype=np.float64).reshape(-1, 2),
        scene_id=doc.get("scene_id", d.name),
        seed=int(doc.get("seed", -1)),
    )


def generate_dataset(n: int, seed: int, params: Optional[DatagenParams], out_dir, split: str = "train",
                     grid: Optional[GridSpec] = None) -> dict:
    """Write ``n`` scenes as ``out_dir/sample_%05d`` plus ``manifest.json``."""
    p = params or DatagenParams()
    p.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    entries = []
    for i in range(n):
        s_seed = sample_seed(split, seed, i)
        name = f"sample_{i:05d}"
        scene = generate_scene(s_seed, p, grid, scene_id=f"{split}-{s_seed}")
        write_scene(out / name, scene)
        entries.append({"dir": name, "seed": s_seed, "scene_id": scene.scene_id})
    manifest = {
        "count": n,
        "split": split,
        "seed": seed,
        "params": p.to_dict(),
        "grid": (grid or GridSpec()).to_dict(),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(directory) -> List[SceneSample]:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if manifest_path.exists():
        names = [e["dir"] for e in json.loads(manifest_path.read_text())["samples"]]
    else:
        names = sorted(p.name for p in d.iterdir() if (p / "scene.json").exists())
    if not names:
        raise FileNotFoundError(f"no samples found in {d}")
    return [read_scene(d / name) for name in names]
