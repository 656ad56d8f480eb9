"""Shared domain types and conventions.

Coordinates are continuous pixel units with pixel ``(row i, col j)`` sampled
at ``x = (j, i)``; the origin is the top-left pixel center.  Images are
``(H, W, C)`` float arrays with nominal range [0, 1]; nothing here clamps.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

CHOL_FLOOR = 1e-3
INIT_SCALE = 5.0


class RsmoeError(Exception):
    pass


class EmptySubset(RsmoeError):
    pass


class NotPositiveDefinite(RsmoeError):
    pass


class DimensionMismatch(RsmoeError):
    pass


class Head(enum.IntEnum):
    RBF = 0
    SMOE = 1

    @classmethod
    def parse(cls, value) -> "Head":
        if isinstance(value, Head):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown head {value!r}, expected 'smoe' or 'rbf'") from None
        return cls(int(value))


class Chol2(NamedTuple):
    l11: float
    l21: float
    l22: float


class Kernel(NamedTuple):
    """One steered Gaussian expert."""
    mu: tuple[float, float]
    chol: Chol2
    log_pi: float
    m: tuple[float, ...]


def cov_from_chol(chol) -> np.ndarray:
    """Covariance ``L @ L.T`` for the lower-triangular factor ``(l11, l21, l22)``."""
    l11, l21, l22 = (float(v) for v in chol)
    return np.array([[l11 * l11, l11 * l21],
                     [l11 * l21, l21 * l21 + l22 * l22]])


@dataclass
class KernelSet:
    """Structure-of-arrays pool of ``L`` kernels.

    ``mu`` is (L, 2) as (x, y), ``chol`` is (L, 3) as (l11, l21, l22),
    ``log_pi`` is (L,), ``m`` is (L, C).
    """
    mu: np.ndarray
    chol: np.ndarray
    log_pi: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64).reshape(-1, 2)
        self.chol = np.ascontiguousarray(self.chol, dtype=np.float64).reshape(-1, 3)
        self.log_pi = np.ascontiguousarray(self.log_pi, dtype=np.float64).reshape(-1)
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        self.m = np.ascontiguousarray(m)
        n = len(self.mu)
        if not (len(self.chol) == len(self.log_pi) == len(self.m) == n):
            raise ValueError("kernel parameter arrays disagree in length")

    def __len__(self):
        return len(self.mu)

    @property
    def channels(self) -> int:
        return self.m.shape[1]

    def __getitem__(self, j) -> Kernel:
        return Kernel(
            mu=(float(self.mu[j, 0]), float(self.mu[j, 1])),
            chol=Chol2(*(float(v) for v in self.chol[j])),
            log_pi=float(self.log_pi[j]),
            m=tuple(float(v) for v in self.m[j]),
        )

    @classmethod
    def from_kernels(cls, kernels) -> "KernelSet":
        kernels = list(kernels)
        return cls(
            mu=np.array([k.mu for k in kernels], dtype=np.float64),
            chol=np.array([tuple(k.chol) for k in kernels], dtype=np.float64),
            log_pi=np.array([k.log_pi for k in kernels], dtype=np.float64),
            m=np.array([k.m for k in kernels], dtype=np.float64),
        )

    @classmethod
    def isotropic(cls, mu, m, scale=INIT_SCALE) -> "KernelSet":
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
        chol = np.zeros((len(mu), 3))
        chol[:, 0] = scale
        chol[:, 2] = scale
        return cls(mu=mu, chol=chol, log_pi=np.zeros(len(mu)), m=m)

    def copy(self) -> "KernelSet":
        return KernelSet(self.mu.copy(), self.chol.copy(), self.log_pi.copy(), self.m.copy())

    def subset(self, ids) -> "KernelSet":
        ids = np.asarray(ids, dtype=np.int64)
        return KernelSet(self.mu[ids], self.chol[ids], self.log_pi[ids], self.m[ids])

    def covariances(self) -> np.ndarray:
        l11, l21, l22 = self.chol.T
        cov = np.empty((len(self), 2, 2))
        cov[:, 0, 0] = l11 * l11
        cov[:, 0, 1] = cov[:, 1, 0] = l11 * l21
        cov[:, 1, 1] = l21 * l21 + l22 * l22
        return cov

    def clamp_chol(self):
        np.maximum(self.chol[:, 0], CHOL_FLOOR, out=self.chol[:, 0])
        np.maximum(self.chol[:, 2], CHOL_FLOOR, out=self.chol[:, 2])


def validate_kernel_set(ks: KernelSet, img=None) -> list[str]:
    """Return human-readable invariant violations; empty means valid."""
    problems = []
    for j in range(len(ks)):
        if not np.all(np.isfinite(ks.mu[j])):
            problems.append(f"kernel {j}: non-finite center {ks.mu[j].tolist()}")
        if not np.all(np.isfinite(ks.chol[j])):
            problems.append(f"kernel {j}: non-finite cholesky factor")
        elif ks.chol[j, 0] < CHOL_FLOOR or ks.chol[j, 2] < CHOL_FLOOR:
            problems.append(f"kernel {j}: cholesky diagonal below {CHOL_FLOOR}: {ks.chol[j].tolist()}")
        if not np.isfinite(ks.log_pi[j]):
            problems.append(f"kernel {j}: non-finite log_pi")
        if not np.all(np.isfinite(ks.m[j])):
            problems.append(f"kernel {j}: non-finite expert value")
    if img is not None:
        img = as_image(img)
        if img.shape[2] != ks.channels:
            problems.append(f"channel mismatch: kernels carry {ks.channels}, image has {img.shape[2]}")
    return problems


def as_image(img) -> np.ndarray:
    """View ``img`` as an (H, W, C) float array."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W), (H, W, 1) or (H, W, 3) image, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


@dataclass(frozen=True)
class TileGrid:
    """Partition of a ``width x height`` image into square tiles.

    ``origin`` shifts the tile lattice: pixel column ``c`` falls in tile
    column ``(c + ox) // tile``.
    """
    width: int
    height: int
    tile: int = 16
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.tile < 1:
            raise ValueError("grid dimensions must be positive")
        ox, oy = self.origin
        if not (0 <= ox < self.tile and 0 <= oy < self.tile):
            raise ValueError(f"origin {self.origin} outside [0, {self.tile})")

    @property
    def nx(self) -> int:
        return -(-(self.width + self.origin[0]) // self.tile)

    @property
    def ny(self) -> int:
        return -(-(self.height + self.origin[1]) // self.tile)

    @property
    def n_blocks(self) -> int:
        return self.nx * self.ny

    def block_bounds(self, n: int) -> tuple[int, int, int, int]:
        """Pixel bounds ``(row0, row1, col0, col1)`` (half-open) of block ``n``."""
        by, bx = divmod(n, self.nx)
        ox, oy = self.origin
        c0 = max(bx * self.tile - ox, 0)
        c1 = min((bx + 1) * self.tile - ox, self.width)
        r0 = max(by * self.tile - oy, 0)
        r1 = min((by + 1) * self.tile - oy, self.height)
        return r0, r1, c0, c1

    def block_of_pixel(self, row: int, col: int) -> int:
        ox, oy = self.origin
        return ((row + oy) // self.tile) * self.nx + (col + ox) // self.tile

    @classmethod
    def single(cls, width: int, height: int) -> "TileGrid":
        """One tile covering the whole image (used for global evaluation)."""
        return cls(width, height, tile=max(width, height))


@dataclass
class TileIndex:
    """Kernel/block incidence stored as two CSR lists.

    ``block_ptr``/``block_kernels`` give the sorted kernel ids of each block,
    ``kernel_ptr``/``kernel_blocks`` the sorted block ids of each kernel.
    ``cull2`` is the squared Mahalanobis radius applied per pixel.
    """
    grid: TileGrid
    n_kernels: int
    block_ptr: np.ndarray
    block_kernels: np.ndarray
    kernel_ptr: np.ndarray = field(default=None)
    kernel_blocks: np.ndarray = field(default=None)
    cull2: float = math.inf

    def __post_init__(self):
        if self.kernel_ptr is None:
            self.kernel_ptr, self.kernel_blocks = _invert_csr(
                self.block_ptr, self.block_kernels, self.n_kernels)

    def kernels_of_block(self, n: int) -> np.ndarray:
        return self.block_kernels[self.block_ptr[n]:self.block_ptr[n + 1]]

    def blocks_of_kernel(self, j: int) -> np.ndarray:
        return self.kernel_blocks[self.kernel_ptr[j]:self.kernel_ptr[j + 1]]

    @property
    def block_sizes(self) -> np.ndarray:
        return np.diff(self.block_ptr)

    def mean_kernels_per_block(self) -> float:
        return float(self.block_sizes.mean())

    def check(self) -> list[str]:
        """Bidirectional-consistency and coverage report (empty = fine)."""
        problems = []
        sizes = self.block_sizes
        if np.any(sizes == 0):
            problems.append(f"empty blocks: {np.flatnonzero(sizes == 0).tolist()}")
        for n in range(self.grid.n_blocks):
            ks = self.kernels_of_block(n)
            if np.any(np.diff(ks) <= 0):
                problems.append(f"block {n}: kernel list not strictly ascending")
        pairs_a = set()
        for n in range(self.grid.n_blocks):
            pairs_a.update((int(j), n) for j in self.kernels_of_block(n))
        pairs_b = set()
        for j in range(self.n_kernels):
            bl = self.blocks_of_kernel(j)
            if np.any(np.diff(bl) <= 0):
                problems.append(f"kernel {j}: block list not strictly ascending")
            pairs_b.update((j, int(n)) for n in bl)
        if pairs_a != pairs_b:
            problems.append("kernels_of_block and blocks_of_kernel disagree")
        return problems


def _invert_csr(ptr, idx, n_cols):
    rows = np.repeat(np.arange(len(ptr) - 1, dtype=np.int64), np.diff(ptr))
    order = np.lexsort((rows, idx))
    counts = np.bincount(idx, minlength=n_cols)
    out_ptr = np.zeros(n_cols + 1, dtype=np.int64)
    np.cumsum(counts, out=out_ptr[1:])
    return out_ptr, rows[order]
