"""Bird's-eye-view rasterization of point clouds, routes and trajectories.

Grid convention: row 0 is the farthest-forward row, column 0 the leftmost.
A point at ego coordinates (x forward, y left) falls in

    row = floor(ego_row - x / resolution),  col = floor(ego_col - y / resolution)

so the ego origin sits on the corner shared by rows ego_row-1/ego_row and
columns ego_col-1/ego_col, and cell (r, c) has its center at
x = (ego_row - r - 0.5) * res, y = (ego_col - c - 0.5) * res.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from . import kernels

Z_MIN_DEFAULT = -2.5
Z_MAX_DEFAULT = 1.5
DENSITY_SATURATION = 64
ROUTE_WIDTH_DEFAULT = 2.0
HEATMAP_SIGMA_DEFAULT = 2.0


@dataclass(frozen=True)
class GridSpec:
    height: int = 160
    width: int = 160
    resolution: float = 0.5
    ego_row: int = 120
    ego_col: int = 80

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"grid size must be positive, got {self.height}x{self.width}")
        if self.height % 8 or self.width % 8:
            raise ValueError(f"grid size {self.height}x{self.width} must be divisible by 8")
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if not (0 < self.ego_row < self.height and 0 < self.ego_col < self.width):
            raise ValueError(f"ego cell ({self.ego_row}, {self.ego_col}) outside grid")
        if self.ego_row % 4 or self.ego_col % 4:
            raise ValueError("ego_row and ego_col must be divisible by 4")

    @classmethod
    def for_size(cls, height: int, width: int, resolution: float = 0.5) -> "GridSpec":
        """Ego a quarter of the way up from the rear edge, laterally centered."""
        return cls(height, width, resolution, ego_row=(height * 3 // 4) // 4 * 4, ego_col=width // 2 // 4 * 4)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def downsample(self, factor: int) -> "GridSpec":
        """The same footprint at ``factor`` times coarser cells (no validation
        of /8 divisibility below the input level)."""
        g = object.__new__(GridSpec)
        object.__setattr__(g, "height", self.height // factor)
        object.__setattr__(g, "width", self.width // factor)
        object.__setattr__(g, "resolution", self.resolution * factor)
        object.__setattr__(g, "ego_row", self.ego_row // factor)
        object.__setattr__(g, "ego_col", self.ego_col // factor)
        return g

    @property
    def extent(self) -> Tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) of the covered area in ego meters."""
        r = self.resolution
        return (
            (self.ego_row - self.height) * r,
            self.ego_row * r,
            (self.ego_col - self.width) * r,
            self.ego_col * r,
        )

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Ego-frame x of every row center and y of every column center."""
        r = self.resolution
        xs = (self.ego_row - np.arange(self.height) - 0.5) * r
        ys = (self.ego_col - np.arange(self.width) - 0.5) * r
        return xs, ys

    def to_cell(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Fractional (row, col) coordinates of ego-frame points, where cell
        centers sit at integer values."""
        xy = np.asarray(xy, dtype=np.float64)
        rows = self.ego_row - xy[..., 0] / self.resolution - 0.5
        cols = self.ego_col - xy[..., 1] / self.resolution - 0.5
        return rows, cols

    def normalize(self, xy: np.ndarray) -> np.ndarray:
        """Ego meters -> [0, 1]^2 over the grid extent."""
        x0, x1, y0, y1 = self.extent
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([(xy[..., 0] - x0) / (x1 - x0), (xy[..., 1] - y0) / (y1 - y0)], axis=-1)

    def denormalize(self, uv: np.ndarray) -> np.ndarray:
        x0, x1, y0, y1 = self.extent
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([x0 + uv[..., 0] * (x1 - x0), y0 + uv[..., 1] * (y1 - y0)], axis=-1)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- point clouds


@dataclass(frozen=True)
class PointCloud:
    """(n, 4) array of x, y, z, intensity in the ego/sensor frame."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        pts = pts.copy()
        pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


TPC_MAGIC = b"TPC1"


def write_tpc(path, cloud: PointCloud) -> None:
    pts = cloud.points.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(TPC_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(pts.tobytes())


def read_tpc(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] != TPC_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {TPC_MAGIC!r}")
    (n,) = struct.unpack("<I", raw[4:8])
    expected = 8 + 16 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {n} points, found {len(raw)}")
    pts = np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 4)
    return PointCloud(pts.astype(np.float64))


def write_grid(path, grid: np.ndarray, spec: GridSpec) -> None:
    """Row-major little-endian f32 payload with a ``.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(grid, dtype="<f4")
    path.write_bytes(arr.tobytes())
    side = {"grid_spec": spec.to_dict(), "shape": list(arr.shape), "dtype": "float32-le"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))


def read_grid(path) -> Tuple[np.ndarray, GridSpec]:
    path = Path(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(side["shape"])
    return arr.copy(), GridSpec(**side["grid_spec"])


def rasterize_cloud(cloud: PointCloud, spec: GridSpec, z_min: float = Z_MIN_DEFAULT,
                    z_max: float = Z_MAX_DEFAULT) -> np.ndarray:
    """Height / intensity / density channels, shape (3, H0, W0)."""
    if not z_max > z_min:
        raise ValueError(f"z_max ({z_max}) must exceed z_min ({z_min})")
    H, W = spec.shape
    out = np.zeros((3, H, W))
    pts = cloud.points
    if pts.shape[0] == 0:
        return out
    rows = np.floor(spec.ego_row - pts[:, 0] / spec.resolution)
    cols = np.floor(spec.ego_col - pts[:, 1] / spec.resolution)
    z = pts[:, 2]
    keep = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W) & (z >= z_min) & (z <= z_max)
    if not keep.any():
        return out
    zmax, imax, count = kernels.bev_accumulate(
        rows[keep].astype(np.int64), cols[keep].astype(np.int64), z[keep], pts[keep, 3], H, W
    )
    occupied = count > 0
    out[0] = np.where(occupied, np.clip((zmax - z_min) / (z_max - z_min), 0.0, 1.0), 0.0)
    out[1] = np.where(occupied, imax, 0.0)
    out[2] = np.minimum(1.0, np.log(count + 1.0) / np.log(DENSITY_SATURATION))
    return out


# ------------------------------------------------------------------ routes


def rasterize_route(route: np.ndarray, spec: GridSpec, width: float = ROUTE_WIDTH_DEFAULT) -> np.ndarray:
    """Binary (H0, W0) mask of cells whose center is within ``width/2`` of
    the polyline ``route`` (ego-frame (n, 2) array)."""
    if width <= 0:
        raise ValueError(f"virtual road width must be positive, got {width}")
    route = np.asarray(route, dtype=np.float64)
    if route.ndim != 2 or route.shape[0] < 2 or route.shape[1] != 2:
        raise ValueError(f"route needs at least 2 points of shape (n, 2), got {route.shape}")
    xs, ys = spec.cell_centers()
    a, b = route[:-1], route[1:]
    mask = kernels.segment_distance_mask(xs, ys, a[:, 0], a[:, 1], b[:, 0], b[:, 1], width / 2.0)
    return mask.astype(np.float64)


def road_target(traj: np.ndarray, spec: GridSpec, factor: int = 4, width: float = ROUTE_WIDTH_DEFAULT) -> np.ndarray:
    """Ground-truth virtual-road mask at 1/``factor`` resolution: a coarse cell
    is on the road when any fine cell inside it is."""
    fine = rasterize_route(traj, spec, width)
    H, W = spec.shape
    return fine.reshape(H // factor, factor, W // factor, factor).max(axis=(1, 3))


# ---------------------------------------------------------------- heatmaps


def make_gt_heatmaps(traj: np.ndarray, spec: GridSpec, sigma: float = HEATMAP_SIGMA_DEFAULT,
                     factor: int = 4) -> np.ndarray:
    """One normalized isotropic Gaussian per waypoint on the 1/``factor`` grid,
    shape (T, H0/factor, W0/factor). ``sigma`` is in coarse cells. Waypoints
    outside the grid yield a uniform map."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    coarse = spec.downsample(factor)
    h, w = coarse.shape
    traj = np.asarray(traj, dtype=np.float64).reshape(-1, 2)
    rows, cols = coarse.to_cell(traj)
    rr = np.arange(h)[:, None]
    cc = np.arange(w)[None, :]
    maps = np.empty((traj.shape[0], h, w))
    for i in range(traj.shape[0]):
        r, c = rows[i], cols[i]
        if not (-0.5 <= r < h - 0.5 and -0.5 <= c < w - 0.5):
            maps[i] = 1.0 / (h * w)
            continue
        g = np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2.0 * sigma * sigma))
        maps[i] = g / g.sum()
    return maps


def soft_argmax(heatmaps: np.ndarray, spec: GridSpec, factor: int = 4, tol: float = 1e-3) -> np.ndarray:
    """Expected cell-center position of each map, in ego meters: (..., N, 2)."""
    hm = np.asarray(heatmaps, dtype=np.float64)
    sums = hm.sum(axis=(-2, -1))
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"heatmaps must each sum to 1 (found sums in [{sums.min():.6g}, {sums.max():.6g}])")
    return hm.reshape(*hm.shape[:-2], -1) @ coarse_centers(spec, factor)


def coarse_centers(spec: GridSpec, factor: int = 4) -> np.ndarray:
    """(h*w, 2) ego-frame centers of the cells of the 1/``factor`` grid, row-major."""
    coarse = spec.downsample(factor)
    xs, ys = coarse.cell_centers()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def bev_stack(cloud: PointCloud, route: np.ndarray, spec: GridSpec, route_width: float = ROUTE_WIDTH_DEFAULT,
              z_min: float = Z_MIN_DEFAULT, z_max: float = Z_MAX_DEFAULT) -> np.ndarray:
    """Network input (4, H0, W0): height, intensity, density, virtual road.

    Channel-first so it feeds the convolutions directly; the (H0, W0, 4)
    view is ``stack.transpose(1, 2, 0)``.
    """
    return np.concatenate([rasterize_cloud(cloud, spec, z_min, z_max),
                           rasterize_route(route, spec, route_width)[None]], axis=0)
