"""Resampling a trained model on a finer grid, with optional sharpening."""
from __future__ import annotations

import math

import numpy as np

from .core import KernelSet, TileGrid
from .geometry import build_tile_index


def sharpened_kernels(ks: KernelSet, s: float) -> KernelSet:
    """Copy with every covariance scaled by ``s`` (Cholesky factor by sqrt(s))."""
    if not 0 < s <= 1:
        raise ValueError("sharpening factor must lie in (0, 1]")
    out = ks.copy()
    if s != 1:
        out.chol *= math.sqrt(s)
    return out


def to_target_frame(ks: KernelSet, scale: float) -> KernelSet:
    """Express kernels in the coordinates of a grid ``scale`` times finer.

    Target pixel ``i`` samples the source at ``(i + 0.5) / scale - 0.5``;
    mapping the kernels forward instead keeps the Mahalanobis distances and
    lets the ordinary tile renderer run on the target grid.
    """
    out = ks.copy()
    if scale != 1:
        out.mu[:] = (ks.mu + 0.5) * scale - 0.5
        out.chol *= scale
    return out


def target_dims(src_dims, scale: float) -> tuple[int, int]:
    w, h = src_dims
    return max(1, int(math.floor(w * scale + 0.5))), max(1, int(math.floor(h * scale + 0.5)))


def superres(ks: KernelSet, head, src_dims, scale: float = 2.0, sharpen: float = 1.0,
             tile: int = 16, rasterized: bool = True, dtype=np.float32) -> np.ndarray:
    """Render ``ks`` (fitted on a ``src_dims = (width, height)`` image) at ``scale``."""
    from .render import render_image

    if scale < 1:
        raise ValueError("scale must be >= 1")
    moved = to_target_frame(sharpened_kernels(ks, sharpen), scale)
    W, H = target_dims(src_dims, scale)
    grid = TileGrid(W, H, tile)
    index = build_tile_index(moved, grid) if rasterized else None
    return render_image(moved, head, grid, index, dtype=dtype)


def box_downsample(img, k: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[0] // k, img.shape[1] // k
    return img[:H * k, :W * k].reshape(H, k, W, k, -1).mean(axis=(1, 3))


def rise_distance(profile, lo: float = 0.1, hi: float = 0.9, step: float = 1.0) -> float:
    """Distance between the 10% and 90% crossings of a monotone-ish edge profile.

    Levels are relative to the profile's own end values; crossings are
    linearly interpolated.
    """
    p = np.asarray(profile, dtype=np.float64)
    a, b = p[0], p[-1]
    if a == b:
        raise ValueError("profile has no edge")
    u = (p - a) / (b - a)

    def crossing(level):
        i = int(np.argmax(u >= level))
        if i == 0:
            return 0.0
        return (i - 1) + (level - u[i - 1]) / (u[i] - u[i - 1])

    return (crossing(hi) - crossing(lo)) * step
