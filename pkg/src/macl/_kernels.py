"""Per-pixel image kernels.

Each kernel has a numba ``@njit`` build and a vectorised numpy build with
identical output.  ``MACL_NUMBA=0`` in the environment (read at import time)
selects the numpy path; so does a missing numba install.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("MACL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def gaussian_kernel3(sigma: float) -> np.ndarray:
    x = np.array([-1.0, 0.0, 1.0])
    k1 = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(k1, k1)
    return k / k.sum()


# -- numpy builds -----------------------------------------------------------
def grid_stats_numpy(img: np.ndarray, grid: int) -> np.ndarray:
    """Mean and std of every (cell, channel); img is (H, W, C) float64."""
    h, w, c = img.shape
    out = np.empty((grid, grid, c, 2))
    rb = [i * h // grid for i in range(grid + 1)]
    cb = [j * w // grid for j in range(grid + 1)]
    for i in range(grid):
        for j in range(grid):
            cell = img[rb[i] : rb[i + 1], cb[j] : cb[j + 1]].reshape(-1, c)
            mu = cell.mean(axis=0)
            out[i, j, :, 0] = mu
            out[i, j, :, 1] = np.sqrt(np.maximum(((cell - mu) ** 2).mean(axis=0), 0.0))
    return out.reshape(-1)


def blur3_numpy(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 convolution with edge replication; img is (H, W, C) float64."""
    h, w, _ = img.shape
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * padded[di : di + h, dj : dj + w]
    return out


def maxpool2_numpy(img: np.ndarray) -> np.ndarray:
    h, w, c = img.shape
    h2, w2 = h // 2, w // 2
    v = img[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, c)
    return v.max(axis=(1, 3))


# -- numba builds -----------------------------------------------------------
if HAVE_NUMBA:

    @numba.njit(cache=True)
    def grid_stats_numba(img, grid):
        h, w, c = img.shape
        out = np.empty((grid, grid, c, 2))
        for i in range(grid):
            r0 = i * h // grid
            r1 = (i + 1) * h // grid
            for j in range(grid):
                c0 = j * w // grid
                c1 = (j + 1) * w // grid
                n = (r1 - r0) * (c1 - c0)
                for ch in range(c):
                    s = 0.0
                    for r in range(r0, r1):
                        for q in range(c0, c1):
                            s += img[r, q, ch]
                    mu = s / n
                    ss = 0.0
                    for r in range(r0, r1):
                        for q in range(c0, c1):
                            dv = img[r, q, ch] - mu
                            ss += dv * dv
                    out[i, j, ch, 0] = mu
                    out[i, j, ch, 1] = math.sqrt(ss / n)
        return out.reshape(-1)

    @numba.njit(cache=True)
    def blur3_numba(img, kernel):
        h, w, c = img.shape
        out = np.zeros_like(img)
        for r in range(h):
            for q in range(w):
                for di in range(3):
                    rr = min(max(r + di - 1, 0), h - 1)
                    for dj in range(3):
                        qq = min(max(q + dj - 1, 0), w - 1)
                        k = kernel[di, dj]
                        for ch in range(c):
                            out[r, q, ch] += k * img[rr, qq, ch]
        return out

    @numba.njit(cache=True)
    def maxpool2_numba(img):
        h, w, c = img.shape
        h2 = h // 2
        w2 = w // 2
        out = np.empty((h2, w2, c))
        for r in range(h2):
            for q in range(w2):
                for ch in range(c):
                    m = img[2 * r, 2 * q, ch]
                    m = max(m, img[2 * r + 1, 2 * q, ch])
                    m = max(m, img[2 * r, 2 * q + 1, ch])
                    m = max(m, img[2 * r + 1, 2 * q + 1, ch])
                    out[r, q, ch] = m
        return out


if USE_NUMBA:
    grid_stats = grid_stats_numba
    blur3 = blur3_numba
    maxpool2 = maxpool2_numba
else:
    grid_stats = grid_stats_numpy
    blur3 = blur3_numpy
    maxpool2 = maxpool2_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
