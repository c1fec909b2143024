"""Hot numeric kernels with two interchangeable implementations.

Each kernel exists as a scalar-loop version compiled with numba's @njit and a
vectorized pure-numpy fallback. The active path is chosen at import time:
numba is used when importable unless the environment variable DETRACK_NUMBA
is set to 0/false/off. Both paths evaluate the same per-element expressions
in float64, so results agree bitwise; tests and benchmarks/kernel_bench.py
exercise both.
"""

from __future__ import annotations

import math
import os

import numpy as np

_flag = os.environ.get("DETRACK_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

try:
    from numba import njit

    _have_numba = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _have_numba = False

NUMBA_ENABLED = _want_numba and _have_numba


# ---------------------------------------------------------------------------
# bilinear crop: sample a square window out of a frame at a fixed output size


def _crop_bilinear_loop(image, x0, y0, side, out_size, pad):
    H, W, C = image.shape
    out = np.empty((out_size, out_size, C), dtype=np.float64)
    scale = side / out_size
    for i in range(out_size):
        sy = y0 + (i + 0.5) * scale - 0.5
        yl = int(math.floor(sy))
        fy = sy - yl
        for j in range(out_size):
            sx = x0 + (j + 0.5) * scale - 0.5
            xl = int(math.floor(sx))
            fx = sx - xl
            for c in range(C):
                if 0 <= yl < H and 0 <= xl < W:
                    v00 = image[yl, xl, c]
                else:
                    v00 = pad[c]
                if 0 <= yl < H and 0 <= xl + 1 < W:
                    v01 = image[yl, xl + 1, c]
                else:
                    v01 = pad[c]
                if 0 <= yl + 1 < H and 0 <= xl < W:
                    v10 = image[yl + 1, xl, c]
                else:
                    v10 = pad[c]
                if 0 <= yl + 1 < H and 0 <= xl + 1 < W:
                    v11 = image[yl + 1, xl + 1, c]
                else:
                    v11 = pad[c]
                top = v00 * (1.0 - fx) + v01 * fx
                bot = v10 * (1.0 - fx) + v11 * fx
                out[i, j, c] = top * (1.0 - fy) + bot * fy
    return out


def _crop_bilinear_numpy(image, x0, y0, side, out_size, pad):
    H, W, C = image.shape
    scale = side / out_size
    sx = x0 + (np.arange(out_size) + 0.5) * scale - 0.5
    sy = y0 + (np.arange(out_size) + 0.5) * scale - 0.5
    xl = np.floor(sx).astype(np.int64)
    yl = np.floor(sy).astype(np.int64)
    fx = (sx - xl)[None, :, None]
    fy = (sy - yl)[:, None, None]

    def gather(yi, xi):
        inside = ((yi >= 0) & (yi < H))[:, None] & ((xi >= 0) & (xi < W))[None, :]
        vals = image[np.clip(yi, 0, H - 1)[:, None], np.clip(xi, 0, W - 1)[None, :]]
        return np.where(inside[:, :, None], vals, pad[None, None, :])

    v00 = gather(yl, xl)
    v01 = gather(yl, xl + 1)
    v10 = gather(yl + 1, xl)
    v11 = gather(yl + 1, xl + 1)
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


# ---------------------------------------------------------------------------
# elementwise IoU over aligned box arrays in corner form


def _iou_xyxy_loop(a, b):
    n = a.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        iw = min(a[i, 2], b[i, 2]) - max(a[i, 0], b[i, 0])
        ih = min(a[i, 3], b[i, 3]) - max(a[i, 1], b[i, 1])
        inter = max(0.0, iw) * max(0.0, ih)
        area_a = max(0.0, a[i, 2] - a[i, 0]) * max(0.0, a[i, 3] - a[i, 1])
        area_b = max(0.0, b[i, 2] - b[i, 0]) * max(0.0, b[i, 3] - b[i, 1])
        union = area_a + area_b - inter
        out[i] = inter / union if union > 0.0 else 0.0
    return out


def _iou_xyxy_numpy(a, b):
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.maximum(0.0, iw) * np.maximum(0.0, ih)
    area_a = np.maximum(0.0, a[:, 2] - a[:, 0]) * np.maximum(0.0, a[:, 3] - a[:, 1])
    area_b = np.maximum(0.0, b[:, 2] - b[:, 0]) * np.maximum(0.0, b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


# ---------------------------------------------------------------------------
# rasterization: fill axis-aligned rectangles and ellipses (pixel-center test)


def _fill_rect_loop(img, x1, y1, x2, y2, color):
    H, W, C = img.shape
    i0 = max(0, int(math.ceil(y1 - 0.5)))
    i1 = min(H, int(math.ceil(y2 - 0.5)))
    j0 = max(0, int(math.ceil(x1 - 0.5)))
    j1 = min(W, int(math.ceil(x2 - 0.5)))
    for i in range(i0, i1):
        for j in range(j0, j1):
            for c in range(C):
                img[i, j, c] = color[c]


def _fill_rect_numpy(img, x1, y1, x2, y2, color):
    H, W, _ = img.shape
    i0 = max(0, int(math.ceil(y1 - 0.5)))
    i1 = min(H, int(math.ceil(y2 - 0.5)))
    j0 = max(0, int(math.ceil(x1 - 0.5)))
    j1 = min(W, int(math.ceil(x2 - 0.5)))
    img[i0:i1, j0:j1] = color


def _fill_ellipse_loop(img, cx, cy, rx, ry, color):
    H, W, C = img.shape
    i0 = max(0, int(math.floor(cy - ry - 1.0)))
    i1 = min(H, int(math.ceil(cy + ry + 1.0)))
    j0 = max(0, int(math.floor(cx - rx - 1.0)))
    j1 = min(W, int(math.ceil(cx + rx + 1.0)))
    for i in range(i0, i1):
        dy = (i + 0.5 - cy) / ry
        for j in range(j0, j1):
            dx = (j + 0.5 - cx) / rx
            if dx * dx + dy * dy <= 1.0:
                for c in range(C):
                    img[i, j, c] = color[c]


def _fill_ellipse_numpy(img, cx, cy, rx, ry, color):
    H, W, _ = img.shape
    i0 = max(0, int(math.floor(cy - ry - 1.0)))
    i1 = min(H, int(math.ceil(cy + ry + 1.0)))
    j0 = max(0, int(math.floor(cx - rx - 1.0)))
    j1 = min(W, int(math.ceil(cx + rx + 1.0)))
    if i1 <= i0 or j1 <= j0:
        return
    ys = (np.arange(i0, i1) + 0.5 - cy) / ry
    xs = (np.arange(j0, j1) + 0.5 - cx) / rx
    mask = ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0
    region = img[i0:i1, j0:j1]
    region[mask] = color


if NUMBA_ENABLED:
    _crop_bilinear_numba = njit(cache=True)(_crop_bilinear_loop)
    _iou_xyxy_numba = njit(cache=True)(_iou_xyxy_loop)
    _fill_rect_numba = njit(cache=True)(_fill_rect_loop)
    _fill_ellipse_numba = njit(cache=True)(_fill_ellipse_loop)
else:
    _crop_bilinear_numba = None
    _iou_xyxy_numba = None
    _fill_rect_numba = None
    _fill_ellipse_numba = None

#: both implementations of every kernel, keyed for tests and the benchmark
IMPLEMENTATIONS = {
    "crop_bilinear": {"numpy": _crop_bilinear_numpy, "numba": _crop_bilinear_numba},
    "iou_xyxy": {"numpy": _iou_xyxy_numpy, "numba": _iou_xyxy_numba},
    "fill_rect": {"numpy": _fill_rect_numpy, "numba": _fill_rect_numba},
    "fill_ellipse": {"numpy": _fill_ellipse_numpy, "numba": _fill_ellipse_numba},
}

_mode = "numba" if NUMBA_ENABLED else "numpy"


def crop_bilinear(image: np.ndarray, x0: float, y0: float, side: float,
                  out_size: int, pad: np.ndarray) -> np.ndarray:
    """Bilinearly resample the square window (x0, y0, side) to out_size^2.

    Output pixel (i, j) samples the source at the window-relative center
    ((j + .5) * side / out, (i + .5) * side / out); samples falling outside
    the frame read the per-channel pad value.
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    pad = np.ascontiguousarray(pad, dtype=np.float64)
    fn = IMPLEMENTATIONS["crop_bilinear"][_mode]
    return fn(image, float(x0), float(y0), float(side), int(out_size), pad)


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of aligned (N, 4) corner-form box arrays."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 4:
        raise ValueError("expected matching (N, 4) box arrays")
    return IMPLEMENTATIONS["iou_xyxy"][_mode](a, b)


def fill_rect(img: np.ndarray, x1: float, y1: float, x2: float, y2: float,
              color: np.ndarray) -> None:
    """Fill pixels whose centers fall in [x1, x2) x [y1, y2); in place."""
    IMPLEMENTATIONS["fill_rect"][_mode](img, float(x1), float(y1), float(x2), float(y2),
                                        np.ascontiguousarray(color, dtype=np.float64))


def fill_ellipse(img: np.ndarray, cx: float, cy: float, rx: float, ry: float,
                 color: np.ndarray) -> None:
    """Fill pixels whose centers fall inside the axis-aligned ellipse; in place."""
    IMPLEMENTATIONS["fill_ellipse"][_mode](img, float(cx), float(cy), float(rx), float(ry),
                                           np.ascontiguousarray(color, dtype=np.float64))
