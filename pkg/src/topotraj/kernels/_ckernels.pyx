# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_fallback.py`` for contracts."""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, C * k * k, Ho * Wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, ix, row, ox_lo, ox_hi
    cdef floating* src
    cdef floating* dst
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        # valid ox range for this tap: 0 <= ox*stride + j - pad < W
                        ox_lo = 0
                        while ox_lo < Wo and ox_lo * stride + j - pad < 0:
                            ox_lo += 1
                        ox_hi = Wo
                        while ox_hi > ox_lo and (ox_hi - 1) * stride + j - pad >= W:
                            ox_hi -= 1
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            src = &x[b, c, iy, 0]
                            dst = &out[b, row, oy * Wo]
                            if stride == 1:
                                for ox in range(ox_lo, ox_hi):
                                    dst[ox] = src[ox + j - pad]
                            else:
                                for ox in range(ox_lo, ox_hi):
                                    dst[ox] = src[ox * stride + j - pad]
    return out_arr


def col2im(floating[:, :, ::1] cols, tuple x_shape, int k, int stride, int pad):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, ox_lo, ox_hi
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        ox_lo = 0
                        while ox_lo < Wo and ox_lo * stride + j - pad < 0:
                            ox_lo += 1
                        ox_hi = Wo
                        while ox_hi > ox_lo and (ox_hi - 1) * stride + j - pad >= W:
                            ox_hi -= 1
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(ox_lo, ox_hi):
                                out[b, c, iy, ox * stride + j - pad] += cols[b, row, oy * Wo + ox]
    return out_arr


def bev_accumulate(cnp.int64_t[::1] rows, cnp.int64_t[::1] cols,
                   double[::1] z, double[::1] intensity, int height, int width):
    zmax_arr = np.full((height, width), -np.inf)
    imax_arr = np.zeros((height, width))
    count_arr = np.zeros((height, width), dtype=np.int64)
    cdef double[:, ::1] zmax = zmax_arr
    cdef double[:, ::1] imax = imax_arr
    cdef cnp.int64_t[:, ::1] count = count_arr
    cdef Py_ssize_t n = rows.shape[0], p, r, c
    with nogil:
        for p in range(n):
            r = rows[p]
            c = cols[p]
            if z[p] > zmax[r, c]:
                zmax[r, c] = z[p]
            if intensity[p] > imax[r, c]:
                imax[r, c] = intensity[p]
            count[r, c] += 1
    return zmax_arr, imax_arr, count_arr


def segment_distance_mask(double[::1] px, double[::1] py,
                          double[::1] ax, double[::1] ay,
                          double[::1] bx, double[::1] by, double radius):
    cdef Py_ssize_t nr = px.shape[0], nc = py.shape[0], ns = ax.shape[0]
    mask_arr = np.zeros((nr, nc), dtype=bool)
    cdef cnp.npy_bool[:, ::1] mask = mask_arr
    cdef Py_ssize_t s, r, c
    cdef double dx, dy, L2, t, ex, ey, r2 = radius * radius
    cdef double xlo, xhi, ylo, yhi
    with nogil:
        for s in range(ns):
            dx = bx[s] - ax[s]
            dy = by[s] - ay[s]
            L2 = dx * dx + dy * dy
            xlo = min(ax[s], bx[s]) - radius
            xhi = max(ax[s], bx[s]) + radius
            ylo = min(ay[s], by[s]) - radius
            yhi = max(ay[s], by[s]) + radius
            for r in range(nr):
                if px[r] < xlo or px[r] > xhi:
                    continue
                for c in range(nc):
                    if mask[r, c] or py[c] < ylo or py[c] > yhi:
                        continue
                    if L2 > 0.0:
                        t = ((px[r] - ax[s]) * dx + (py[c] - ay[s]) * dy) / L2
                        if t < 0.0:
                            t = 0.0
                        elif t > 1.0:
                            t = 1.0
                    else:
                        t = 0.0
                    ex = px[r] - (ax[s] + t * dx)
                    ey = py[c] - (ay[s] + t * dy)
                    if ex * ex + ey * ey < r2:
                        mask[r, c] = 1
    return mask_arr
