"""Static SVG overlays of a scene: BEV density, local route, ground truth and
prediction."""

from __future__ import annotations

import base64
import struct
import zlib
from typing import Optional

import numpy as np

from .raster import GridSpec

ROUTE_COLOR = "#1f5fff"  # blue
GT_COLOR = "#e41a1c"     # red
PRED_COLOR = "#1a9c3a"   # green


def _png_gray(img: np.ndarray) -> bytes:
    """Minimal 8-bit grayscale PNG (zlib is all a PNG stream needs)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        body = tag + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header) + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")


def _pixels(traj: np.ndarray, spec: GridSpec, scale: float) -> str:
    traj = np.asarray(traj, dtype=np.float64)
    col = (spec.ego_col - traj[:, 1] / spec.resolution) * scale
    row = (spec.ego_row - traj[:, 0] / spec.resolution) * scale
    return " ".join(f"{c:.2f},{r:.2f}" for c, r in zip(col, row))


def render_svg(density: np.ndarray, spec: GridSpec, route: Optional[np.ndarray] = None,
               gt: Optional[np.ndarray] = None, pred: Optional[np.ndarray] = None, scale: float = 4.0) -> str:
    """SVG text. ``density`` is the (H, W) density channel in [0, 1], drawn
    dark-on-light; trajectories are ego-frame (n, 2) arrays in meters."""
    density = np.asarray(density, dtype=np.float64)
    if density.shape != spec.shape:
        raise ValueError(f"density {density.shape} does not match grid {spec.shape}")
    gray = np.clip(255.0 * (1.0 - density), 0, 255).round()
    uri = "data:image/png;base64," + base64.b64encode(_png_gray(gray)).decode("ascii")
    W, H = spec.width * scale, spec.height * scale
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{W:g}" height="{H:g}" viewBox="0 0 {W:g} {H:g}">',
        f'<image x="0" y="0" width="{W:g}" height="{H:g}" preserveAspectRatio="none" '
        f'style="image-rendering:pixelated" xlink:href="{uri}"/>',
    ]
    for name, traj, color in (("route", route, ROUTE_COLOR), ("ground-truth", gt, GT_COLOR),
                              ("prediction", pred, PRED_COLOR)):
        if traj is None or len(traj) == 0:
            continue
        parts.append(f'<polyline class="{name}" fill="none" stroke="{color}" stroke-width="{0.6 * scale:g}" '
                     f'points="{_pixels(traj, spec, scale)}"/>')
    ex, ey = spec.ego_col * scale, spec.ego_row * scale
    parts.append(f'<circle cx="{ex:g}" cy="{ey:g}" r="{1.5 * scale:g}" fill="black"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
