"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and the same results (bit-identical for the integer/max paths,
identical up to float summation order for the scatter-add).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, k, stride, pad):
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo) patch matrix."""
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    sB, sC, sH, sW = x.strides
    view = as_strided(
        x,
        shape=(B, C, k, k, Ho, Wo),
        strides=(sB, sC, sH, sW, sH * stride, sW * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(B, C * k * k, Ho * Wo)


def col2im(cols, x_shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(k):
        i_end = i + stride * Ho
        for j in range(k):
            out[:, :, i:i_end:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(out)


def bev_accumulate(rows, cols, z, intensity, height, width):
    """Per-cell max z, max intensity and point count.

    ``rows``/``cols`` are in-range int64 cell indices. Empty cells get
    ``-inf`` for max z, 0 for intensity and count.
    """
    flat = rows * width + cols
    n = height * width
    zmax = np.full(n, -np.inf)
    imax = np.zeros(n)
    np.maximum.at(zmax, flat, z)
    np.maximum.at(imax, flat, intensity)
    count = np.bincount(flat, minlength=n)
    return (
        zmax.reshape(height, width),
        imax.reshape(height, width),
        count.reshape(height, width).astype(np.int64),
    )


def segment_distance_mask(px, py, ax, ay, bx, by, radius):
    """Boolean grid: True where the point (px[r], py[c]) is within ``radius``
    of any segment (a_i, b_i). ``px`` indexes rows, ``py`` indexes columns."""
    X = px[:, None]
    Y = py[None, :]
    r2 = radius * radius
    mask = np.zeros((px.size, py.size), dtype=bool)
    for i in range(ax.size):
        dx, dy = bx[i] - ax[i], by[i] - ay[i]
        # rows/cols whose cells can be touched by this segment
        rsel = (X[:, 0] >= min(ax[i], bx[i]) - radius) & (X[:, 0] <= max(ax[i], bx[i]) + radius)
        csel = (Y[0] >= min(ay[i], by[i]) - radius) & (Y[0] <= max(ay[i], by[i]) + radius)
        if not rsel.any() or not csel.any():
            continue
        xs = X[rsel]
        ys = Y[:, csel]
        L2 = dx * dx + dy * dy
        if L2 > 0.0:
            t = ((xs - ax[i]) * dx + (ys - ay[i]) * dy) / L2
            t = np.clip(t, 0.0, 1.0)
        else:
            t = np.zeros(np.broadcast_shapes(xs.shape, ys.shape))
        ex = xs - (ax[i] + t * dx)
        ey = ys - (ay[i] + t * dy)
        hit = ex * ex + ey * ey < r2
        sub = mask[np.ix_(rsel, csel)]
        mask[np.ix_(rsel, csel)] = sub | hit
    return mask
