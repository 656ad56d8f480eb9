"""Squared-error loss and its analytic gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._raster import N_GEOM, raster_pass
from .core import Head, KernelSet, TileIndex, as_image
from .geometry import global_index


@dataclass
class ParamGrads:
    mu: np.ndarray
    chol: np.ndarray
    log_pi: np.ndarray
    m: np.ndarray

    @classmethod
    def from_packed(cls, packed: np.ndarray) -> "ParamGrads":
        return cls(mu=packed[:, 0:2], chol=packed[:, 2:5], log_pi=packed[:, 5],
                   m=packed[:, N_GEOM:])

    def packed(self) -> np.ndarray:
        return np.concatenate([self.mu, self.chol, self.log_pi[:, None], self.m], axis=1)


def _index_for(ks, target, index):
    H, W = target.shape[:2]
    if index is None:
        return global_index(ks, W, H)
    if (index.grid.width, index.grid.height) != (W, H):
        raise ValueError("index grid does not match target dimensions")
    return index


def forward(ks: KernelSet, head, target, index: TileIndex | None = None, want_grad=False):
    """Return ``(mse, rendered, packed_grads_or_None)``."""
    target = as_image(target)
    index = _index_for(ks, target, index)
    img, sse, g = raster_pass(ks, Head.parse(head) is Head.SMOE, index, target=target,
                              want_grad=want_grad)
    mse = float(sse.sum()) / target.size
    return mse, img, g


def loss(ks: KernelSet, head, target, index: TileIndex | None = None) -> float:
    """Mean squared error over all pixels and channels."""
    return forward(ks, head, target, index)[0]


def backward(ks: KernelSet, head, target, index: TileIndex | None = None,
             blocks=None) -> ParamGrads:
    """Gradient of :func:`loss`.

    ``blocks`` limits the accumulation to the given tiles (the loss
    normalisation stays that of the full image).
    """
    target = as_image(target)
    index = _index_for(ks, target, index)
    _, _, g = raster_pass(ks, Head.parse(head) is Head.SMOE, index,
                          target=np.ascontiguousarray(target, dtype=np.float64),
                          want_grad=True, blocks=blocks)
    return ParamGrads.from_packed(g)


# (field, column) addressing of one scalar parameter
_FIELDS = {"mu": 2, "chol": 3, "log_pi": None, "m": None}


def _perturbed(ks: KernelSet, field: str, j: int, col: int, delta: float) -> KernelSet:
    out = ks.copy()
    arr = getattr(out, field)
    if arr.ndim == 1:
        arr[j] += delta
    else:
        arr[j, col] += delta
    return out


def fd_oracle(ks: KernelSet, head, target, coord, h: float = 1e-4,
              index: TileIndex | None = None) -> float:
    """Central finite difference of the loss along one parameter.

    ``coord`` is ``(field, kernel, column)`` with field one of ``mu``,
    ``chol``, ``log_pi``, ``m`` (column ignored for ``log_pi``).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    field, j, col = coord
    if field not in _FIELDS:
        raise KeyError(field)
    up = loss(_perturbed(ks, field, j, col, h), head, target, index)
    down = loss(_perturbed(ks, field, j, col, -h), head, target, index)
    return (up - down) / (2.0 * h)


def grad_coordinates(ks: KernelSet):
    """Every scalar parameter coordinate, in packed-column order."""
    for j in range(len(ks)):
        yield ("mu", j, 0)
        yield ("mu", j, 1)
        for c in range(3):
            yield ("chol", j, c)
        yield ("log_pi", j, 0)
        for c in range(ks.channels):
            yield ("m", j, c)


def grad_value(grads: ParamGrads, coord) -> float:
    field, j, col = coord
    arr = getattr(grads, field)
    return float(arr[j] if arr.ndim == 1 else arr[j, col])
