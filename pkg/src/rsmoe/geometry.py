"""Confidence ellipses, bounding boxes and the kernel/block index."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .core import KernelSet, NotPositiveDefinite, TileGrid, TileIndex, cov_from_chol

# sqrt of the 0.99 quantile of chi-square with 2 dof (9.21034...)
CHI2_99_DOF2 = 9.210340371976184
R99 = math.sqrt(CHI2_99_DOF2)


class Ellipse99(NamedTuple):
    center: tuple[float, float]
    major_axis_len: float
    minor_axis_len: float
    orientation: float


class BBox(NamedTuple):
    center: tuple[float, float]
    side: float

    @property
    def lo(self):
        h = 0.5 * self.side
        return (self.center[0] - h, self.center[1] - h)

    @property
    def hi(self):
        h = 0.5 * self.side
        return (self.center[0] + h, self.center[1] + h)


def eig2x2(cov):
    """Closed-form eigen-decomposition of a symmetric positive-definite 2x2.

    Returns ``(lam_max, lam_min, v)`` with ``v`` the unit eigenvector of
    ``lam_max``.  For isotropic input ``v = (1, 0)``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    a, b, c = cov[0, 0], 0.5 * (cov[0, 1] + cov[1, 0]), cov[1, 1]
    tr = a + c
    det = a * c - b * b
    if tr <= 0 or det <= 0:
        raise NotPositiveDefinite(f"covariance not positive definite (trace={tr}, det={det})")
    half_gap = math.hypot(0.5 * (a - c), b)
    lam_max = 0.5 * tr + half_gap
    # det / lam_max is the stable way to the small root
    lam_min = min(det / lam_max, lam_max)
    if half_gap == 0.0:
        return lam_max, lam_min, np.array([1.0, 0.0])
    # pick the better conditioned of the two null-space rows of (cov - lam I)
    if a >= c:
        v = np.array([lam_max - c, b])
    else:
        v = np.array([b, lam_max - a])
    v /= math.hypot(v[0], v[1])
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    return lam_max, lam_min, v


def confidence_ellipse(kernel, radius: float = R99) -> Ellipse99:
    lam_max, lam_min, v = eig2x2(cov_from_chol(kernel.chol))
    return Ellipse99(
        center=tuple(kernel.mu),
        major_axis_len=2.0 * radius * math.sqrt(lam_max),
        minor_axis_len=2.0 * radius * math.sqrt(lam_min),
        orientation=math.atan2(v[1], v[0]),
    )


def bounding_box(kernel, radius: float = R99) -> BBox:
    """Square box centered on the kernel, side equal to the full major axis."""
    e = confidence_ellipse(kernel, radius)
    return BBox(center=e.center, side=e.major_axis_len)


def lambda_max(ks: KernelSet) -> np.ndarray:
    l11, l21, l22 = ks.chol.T
    a = l11 * l11
    b = l11 * l21
    c = l21 * l21 + l22 * l22
    return 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)


def box_half_sides(ks: KernelSet, radius: float = R99) -> np.ndarray:
    return radius * np.sqrt(lambda_max(ks))


def mahalanobis2(kernel, x) -> float:
    """Squared Mahalanobis distance of ``x`` from the kernel center."""
    l11, l21, l22 = kernel.chol
    z1 = (x[0] - kernel.mu[0]) / l11
    z2 = (x[1] - kernel.mu[1] - l21 * z1) / l22
    return z1 * z1 + z2 * z2


def _tile_range(lo, hi, offset, tile, n):
    with np.errstate(invalid="ignore"):
        a = np.floor((np.clip(lo, -1e18, 1e18) + offset) / tile)
        b = np.floor((np.clip(hi, -1e18, 1e18) + offset) / tile)
    a = np.clip(a, 0, n).astype(np.int64)
    b = np.clip(b, -1, n - 1).astype(np.int64)
    return a, b


def build_tile_index(ks: KernelSet, grid: TileGrid, radius: float = R99,
                     fallback: bool = True, pixel_cull: bool = True) -> TileIndex:
    """Assign every kernel to each tile its bounding box touches.

    Tiles nobody reaches get the kernel whose center is nearest to the tile
    center (lowest id on ties) unless ``fallback`` is off.  ``radius = inf``
    puts every kernel in every tile and disables per-pixel culling.
    With ``pixel_cull`` off, every pixel of a tile sees the tile's whole list.
    """
    L = len(ks)
    if L == 0:
        raise ValueError("cannot index an empty kernel set")
    nb = grid.n_blocks
    if math.isinf(radius):
        block_kernels = np.tile(np.arange(L, dtype=np.int64), nb)
        block_ptr = np.arange(nb + 1, dtype=np.int64) * L
        return TileIndex(grid, L, block_ptr, block_kernels, cull2=math.inf)

    half = box_half_sides(ks, radius)
    ox, oy = grid.origin
    bx0, bx1 = _tile_range(ks.mu[:, 0] - half, ks.mu[:, 0] + half, ox, grid.tile, grid.nx)
    by0, by1 = _tile_range(ks.mu[:, 1] - half, ks.mu[:, 1] + half, oy, grid.tile, grid.ny)
    wx = np.maximum(bx1 - bx0 + 1, 0)
    wy = np.maximum(by1 - by0 + 1, 0)
    counts = wx * wy
    total = int(counts.sum())

    kern = np.repeat(np.arange(L, dtype=np.int64), counts)
    start = np.zeros(L + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    local = np.arange(total, dtype=np.int64) - np.repeat(start[:-1], counts)
    wx_r = np.repeat(wx, counts)
    wx_r[wx_r == 0] = 1
    bx = np.repeat(bx0, counts) + local % wx_r
    by = np.repeat(by0, counts) + local // wx_r
    blocks = by * grid.nx + bx

    covered = np.zeros(nb, dtype=bool)
    covered[blocks] = True
    if fallback and not covered.all():
        empty = np.flatnonzero(~covered)
        centers = np.array([_block_center(grid, n) for n in empty])
        d2 = ((centers[:, None, :] - ks.mu[None, :, :]) ** 2).sum(-1)
        nearest = np.argmin(d2, axis=1)
        blocks = np.concatenate([blocks, empty])
        kern = np.concatenate([kern, nearest])

    order = np.lexsort((kern, blocks))
    blocks = blocks[order]
    kern = kern[order]
    block_ptr = np.zeros(nb + 1, dtype=np.int64)
    np.cumsum(np.bincount(blocks, minlength=nb), out=block_ptr[1:])
    return TileIndex(grid, L, block_ptr, kern, cull2=radius * radius if pixel_cull else math.inf)


def _block_center(grid: TileGrid, n: int):
    r0, r1, c0, c1 = grid.block_bounds(n)
    return (0.5 * (c0 + c1 - 1), 0.5 * (r0 + r1 - 1))


def global_index(ks: KernelSet, width: int, height: int) -> TileIndex:
    """Every pixel sees every kernel with no culling."""
    return build_tile_index(ks, TileGrid.single(width, height), radius=math.inf)
