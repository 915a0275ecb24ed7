"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built; otherwise the pure numpy
versions are selected. Set ``TOPOTRAJ_KERNELS=python`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("TOPOTRAJ_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def im2col(x, k, stride, pad):
    if BACKEND == "cython" and x.dtype.kind == "f" and x.flags.c_contiguous:
        return _impl.im2col(x, k, stride, pad)
    return _fallback.im2col(x, k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    if BACKEND == "cython" and cols.flags.c_contiguous:
        return _impl.col2im(cols, tuple(x_shape), k, stride, pad)
    return _fallback.col2im(cols, x_shape, k, stride, pad)


def bev_accumulate(rows, cols, z, intensity, height, width):
    import numpy as np

    args = (
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(intensity, dtype=np.float64),
    )
    return _impl.bev_accumulate(*args, int(height), int(width))


def segment_distance_mask(px, py, ax, ay, bx, by, radius):
    import numpy as np

    f = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    return _impl.segment_distance_mask(f(px), f(py), f(ax), f(ay), f(bx), f(by), float(radius))


__all__ = ["BACKEND", "im2col", "col2im", "bev_accumulate", "segment_distance_mask"]
