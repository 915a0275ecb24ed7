"""Topometric maps: sparse waypoint graphs used as a weak route prior.

Vertices are planar (x, y) meters; edges are index pairs. Maps are
immutable values: every operation returns a new map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_SPACING = 1.0
DEFAULT_FORWARD = 50.0
DEFAULT_BACKWARD = 20.0
DEFAULT_OFF_ROUTE = 25.0
_EPS_EDGE = 1e-9


class InvalidMapError(ValueError):
    pass


class OffRouteError(RuntimeError):
    pass


class OutOfDomainError(ValueError):
    pass


@dataclass(frozen=True)
class EgoPose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading)):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def to_ego(self, pts: np.ndarray) -> np.ndarray:
        """Planar (n, 2) points -> ego frame (+x forward, +y left)."""
        d = np.asarray(pts, dtype=np.float64) - self.position
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack([c * p[..., 0] - s * p[..., 1] + self.x, s * p[..., 0] + c * p[..., 1] + self.y], axis=-1)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "heading": self.heading}


def normalize_angle(a: float) -> float:
    """Map to (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


class TopometricMap:
    __slots__ = ("_vertices", "_edges")

    def __init__(self, vertices, edges):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 2)
        e = np.array(edges, dtype=np.int64).reshape(-1, 2)
        if not np.all(np.isfinite(v)):
            raise InvalidMapError("map vertices must be finite")
        if e.shape[0] == 0:
            raise InvalidMapError("map needs at least one edge")
        if e.min() < 0 or e.max() >= v.shape[0]:
            raise InvalidMapError(f"edge index out of range for {v.shape[0]} vertices")
        lengths = np.linalg.norm(v[e[:, 1]] - v[e[:, 0]], axis=1)
        bad = np.flatnonzero(lengths <= _EPS_EDGE)
        if bad.size:
            raise InvalidMapError(f"zero-length edge {e[bad[0]].tolist()}")
        v.setflags(write=False)
        e.setflags(write=False)
        self._vertices = v
        self._edges = e

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def edges(self) -> np.ndarray:
        return self._edges

    def __len__(self):
        return self._vertices.shape[0]

    def __eq__(self, other):
        return (isinstance(other, TopometricMap) and np.array_equal(self._vertices, other._vertices)
                and np.array_equal(self._edges, other._edges))

    def __repr__(self):
        return f"TopometricMap({len(self)} vertices, {self._edges.shape[0]} edges)"

    @classmethod
    def from_polyline(cls, pts) -> "TopometricMap":
        pts = np.asarray(pts, dtype=np.float64)
        n = pts.shape[0]
        return cls(pts, np.stack([np.arange(n - 1), np.arange(1, n)], axis=1))

    def adjacency(self) -> List[List[int]]:
        adj: List[List[int]] = [[] for _ in range(len(self))]
        for a, b in self._edges:
            adj[a].append(int(b))
            adj[b].append(int(a))
        return adj

    def transformed(self, rotation: float, translation) -> "TopometricMap":
        c, s = math.cos(rotation), math.sin(rotation)
        R = np.array([[c, -s], [s, c]])
        return TopometricMap(self._vertices @ R.T + np.asarray(translation, dtype=np.float64), self._edges)

    # serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        return {"vertices": self._vertices.tolist(), "edges": self._edges.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "TopometricMap":
        verts = np.asarray(doc["vertices"], dtype=np.float64)
        crs = doc.get("crs") or {}
        if crs.get("lat_lon"):
            cm = float(crs["central_meridian"])
            verts = np.array([project_lat_lon(lat, lon, cm) for lat, lon in verts]).reshape(-1, 2)
        return cls(verts, doc["edges"])


def save_map(path, m: TopometricMap) -> None:
    Path(path).write_text(json.dumps(m.to_json()))


def load_map(path) -> TopometricMap:
    return TopometricMap.from_json(json.loads(Path(path).read_text()))


# ------------------------------------------------------------- densification


def densify_map(m: TopometricMap, spacing: float = DEFAULT_SPACING) -> TopometricMap:
    """Linearly interpolate every edge so consecutive points are at most
    ``spacing`` apart. Original vertices keep their indices; new points are
    appended edge by edge."""
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    verts = [m.vertices]
    edges = []
    next_idx = len(m)
    for a, b in m.edges:
        pa, pb = m.vertices[a], m.vertices[b]
        length = float(np.linalg.norm(pb - pa))
        # tolerance keeps already-dense edges from being split again
        pieces = max(1, math.ceil(length / spacing - 1e-9))
        if pieces == 1:
            edges.append((a, b))
            continue
        t = np.arange(1, pieces)[:, None] / pieces
        inner = pa + t * (pb - pa)
        idx = list(range(next_idx, next_idx + pieces - 1))
        next_idx += pieces - 1
        verts.append(inner)
        chain = [int(a)] + idx + [int(b)]
        edges.extend(zip(chain[:-1], chain[1:]))
    return TopometricMap(np.concatenate(verts, axis=0), edges)


# ---------------------------------------------------------------- projection

_WGS84_A = 6378137.0
_WGS84_F = 1 / 298.257223563
_K0 = 0.9996
_FALSE_EASTING = 500000.0


def project_lat_lon(lat: float, lon: float, zone_central_meridian: float) -> np.ndarray:
    """Transverse Mercator (UTM parameters, WGS84) via Krueger's n-series.

    Returns (easting, northing) in meters; northing is not offset for the
    southern hemisphere.
    """
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise OutOfDomainError("latitude/longitude must be finite")
    if abs(lat) >= 84.0:
        raise OutOfDomainError(f"latitude {lat} outside the UTM domain |lat| < 84")
    f = _WGS84_F
    n = f / (2 - f)
    A = _WGS84_A / (1 + n) * (1 + n ** 2 / 4 + n ** 4 / 64 + n ** 6 / 256)
    alpha = (
        n / 2 - 2 * n ** 2 / 3 + 5 * n ** 3 / 16 + 41 * n ** 4 / 180 - 127 * n ** 5 / 288 + 7891 * n ** 6 / 37800,
        13 * n ** 2 / 48 - 3 * n ** 3 / 5 + 557 * n ** 4 / 1440 + 281 * n ** 5 / 630 - 1983433 * n ** 6 / 1935360,
        61 * n ** 3 / 240 - 103 * n ** 4 / 140 + 15061 * n ** 5 / 26880 + 167603 * n ** 6 / 181440,
        49561 * n ** 4 / 161280 - 179 * n ** 5 / 168 + 6601661 * n ** 6 / 7257600,
        34729 * n ** 5 / 80640 - 3418889 * n ** 6 / 1995840,
        212378941 * n ** 6 / 319334400,
    )
    phi = math.radians(lat)
    dlam = math.radians(lon - zone_central_meridian)
    e = math.sqrt(f * (2 - f))
    t = math.sinh(math.atanh(math.sin(phi)) - e * math.atanh(e * math.sin(phi)))
    xi_p = math.atan2(t, math.cos(dlam))
    eta_p = math.atanh(math.sin(dlam) / math.sqrt(1 + t * t))
    xi, eta = xi_p, eta_p
    for j, a in enumerate(alpha, start=1):
        xi += a * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += a * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)
    return np.array([_FALSE_EASTING + _K0 * A * eta, _K0 * A * xi])


# ----------------------------------------------------------------- local route


def nearest_vertex(m: TopometricMap, point) -> Tuple[int, float]:
    d = np.linalg.norm(m.vertices - np.asarray(point, dtype=np.float64), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def _walk(m: TopometricMap, adj, start: int, first: int, budget: float) -> List[np.ndarray]:
    """Follow the graph from ``start`` through ``first`` for ``budget`` meters,
    continuing at each vertex along the straightest unvisited edge. The last
    point is interpolated so the walk ends exactly at ``budget`` when the
    graph is long enough."""
    V = m.vertices
    pts: List[np.ndarray] = []
    prev, cur = start, first
    travelled = 0.0
    visited = {start}
    while True:
        seg = float(np.linalg.norm(V[cur] - V[prev]))
        if travelled + seg >= budget:
            t = (budget - travelled) / seg
            pts.append(V[prev] + t * (V[cur] - V[prev]))
            return pts
        travelled += seg
        pts.append(V[cur].copy())
        visited.add(cur)
        direction = V[cur] - V[prev]
        cands = [n for n in adj[cur] if n not in visited]
        if not cands:
            return pts
        nxt = max(cands, key=lambda n: _cos(direction, V[n] - V[cur]))
        prev, cur = cur, nxt


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else -1.0


def extract_local_route(m: TopometricMap, pose: EgoPose, forward_window: float = DEFAULT_FORWARD,
                        backward_window: float = DEFAULT_BACKWARD,
                        off_route_threshold: float = DEFAULT_OFF_ROUTE) -> np.ndarray:
    """Ego-frame route around the map vertex nearest ``pose``: up to
    ``backward_window`` meters behind and ``forward_window`` ahead along the
    graph, ordered back to front. Returns an (n, 2) array."""
    if forward_window <= 0 or backward_window <= 0:
        raise ValueError("route windows must be positive")
    start, dist = nearest_vertex(m, pose.position)
    if dist > off_route_threshold:
        raise OffRouteError(f"nearest map vertex is {dist:.2f} m away (threshold {off_route_threshold} m)")
    adj = m.adjacency()
    V = m.vertices
    nbrs = adj[start]
    if not nbrs:
        raise InvalidMapError(f"nearest vertex {start} has no edges")
    heading = np.array([math.cos(pose.heading), math.sin(pose.heading)])
    score = {n: _cos(heading, V[n] - V[start]) for n in nbrs}
    ahead = max(nbrs, key=lambda n: score[n])
    behind = min(nbrs, key=lambda n: score[n])
    if len(nbrs) == 1:
        # route end: the single edge is either ahead or behind
        ahead, behind = (ahead, None) if score[ahead] >= 0 else (None, behind)
    forward_pts = _walk(m, adj, start, ahead, forward_window) if ahead is not None else []
    backward_pts = _walk(m, adj, start, behind, backward_window) if behind is not None else []
    route = np.array(backward_pts[::-1] + [V[start]] + forward_pts).reshape(-1, 2)
    if route.shape[0] < 2:
        raise InvalidMapError("local route has fewer than two points")
    return pose.to_ego(route)


def route_arc_lengths(route: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


# ----------------------------------------------------------------- perturbation


def vertex_normals(m: TopometricMap) -> np.ndarray:
    """Unit left normal at each vertex, from the mean direction of its edges."""
    V = m.vertices
    tang = np.zeros_like(V)
    for a, b in m.edges:
        d = V[b] - V[a]
        d = d / np.linalg.norm(d)
        tang[a] += d
        tang[b] += d
    norms = np.linalg.norm(tang, axis=1)
    # a vertex whose edge directions cancel (a hairpin) falls back to its first edge
    for i in np.flatnonzero(norms < 1e-9):
        a, b = next((int(a), int(b)) for a, b in m.edges if a == i or b == i)
        tang[i] = V[b] - V[a]
        norms[i] = np.linalg.norm(tang[i])
    tang /= norms[:, None]
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


def _hop_neighbourhoods(m: TopometricMap, hops: int) -> List[List[int]]:
    adj = m.adjacency()
    out = []
    for i in range(len(m)):
        seen = {i}
        frontier = [i]
        for _ in range(hops):
            frontier = [n for f in frontier for n in adj[f] if n not in seen]
            seen.update(frontier)
        out.append(sorted(seen))
    return out


def lateral_offsets(m: TopometricMap, magnitude: float, seed: int, constant: bool = False,
                    window: int = 5) -> np.ndarray:
    """Smooth random per-vertex offsets with peak |offset| equal to ``magnitude``.

    Raw uniform draws are averaged over each vertex's graph neighbourhood
    (``window // 2`` hops, i.e. a ``window``-vertex moving average along a
    polyline), then rescaled so the largest magnitude is ``magnitude``.
    """
    count = len(m)
    rng = np.random.default_rng(seed)
    if constant:
        return np.full(count, magnitude * (1.0 if rng.random() < 0.5 else -1.0))
    raw = rng.uniform(-magnitude, magnitude, size=count)
    smooth = np.array([raw[nb].mean() for nb in _hop_neighbourhoods(m, window // 2)])
    peak = np.max(np.abs(smooth))
    if np.max(np.abs(raw)) > 0 and peak > 0:
        smooth = smooth * (magnitude / peak)
    return smooth


def perturb_lateral(m: TopometricMap, magnitude: float, seed: int, constant: bool = False) -> TopometricMap:
    """Shift every vertex along its normal by a smooth random offset whose
    sup-norm is exactly ``magnitude``; topology is untouched."""
    if magnitude < 0:
        raise ValueError(f"perturbation magnitude must be >= 0, got {magnitude}")
    if magnitude == 0:
        return m
    offs = lateral_offsets(m, magnitude, seed, constant)
    return TopometricMap(m.vertices + offs[:, None] * vertex_normals(m), m.edges)
