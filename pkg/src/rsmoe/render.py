"""Forward evaluation of the RBF and SMoE regression heads."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from ._raster import raster_pass
from .core import EmptySubset, Head, KernelSet, RsmoeError, TileGrid, TileIndex
from .geometry import global_index, mahalanobis2

EPS_DEN = 1e-12


class DenominatorUnderflow(RsmoeError):
    pass


class GateEval(NamedTuple):
    w: np.ndarray
    # sum_i pi_i K_i(x), unshifted
    den: float


def kernel_eval(kernel, x) -> float:
    return math.exp(-0.5 * mahalanobis2(kernel, x))


def _as_kernels(ks):
    if isinstance(ks, KernelSet):
        return [ks[j] for j in range(len(ks))]
    return list(ks)


def gates_at(kernels, x, log_pis=None) -> GateEval:
    """Softmax gates at ``x``, computed with a max shift in the log domain."""
    kernels = _as_kernels(kernels)
    if not kernels:
        raise EmptySubset("gates need at least one kernel")
    if log_pis is None:
        log_pis = [k.log_pi for k in kernels]
    logs = np.array([lp - 0.5 * mahalanobis2(k, x) for k, lp in zip(kernels, log_pis)])
    shift = logs.max()
    if not np.isfinite(shift):
        raise DenominatorUnderflow(f"gate log-terms not finite at {tuple(x)}")
    e = np.exp(logs - shift)
    den_shifted = e.sum()
    if den_shifted <= EPS_DEN:
        raise DenominatorUnderflow(f"gate denominator {den_shifted} at {tuple(x)}")
    return GateEval(w=e / den_shifted, den=float(den_shifted * math.exp(shift)))


def render_point(ks, head, x, subset=None) -> np.ndarray:
    """Per-channel model value at a continuous coordinate.

    ``subset`` restricts the model (and the gate normalization) to the given
    kernel ids.
    """
    head = Head.parse(head)
    kernels = _as_kernels(ks)
    if subset is not None:
        subset = list(subset)
        if not subset:
            raise EmptySubset("subset is empty")
        kernels = [kernels[j] for j in subset]
    if not kernels:
        raise EmptySubset("no kernels to render")
    m = np.array([k.m for k in kernels], dtype=np.float64)
    if head is Head.SMOE:
        w = gates_at(kernels, x).w
    else:
        w = np.array([kernel_eval(k, x) for k in kernels])
    return w @ m


def render_image(ks: KernelSet, head, grid: TileGrid, index: TileIndex | None = None,
                 dtype=np.float32) -> np.ndarray:
    """Render the model on the pixel grid of ``grid``.

    Without ``index`` every pixel sees every kernel.  With an index each pixel
    sees only its tile's kernels that pass the per-pixel ellipse test.
    """
    if len(ks) == 0:
        raise EmptySubset("no kernels to render")
    head = Head.parse(head)
    if index is None:
        index = global_index(ks, grid.width, grid.height)
    elif index.n_kernels != len(ks):
        raise ValueError("index was built for a different kernel set")
    img, _, _ = raster_pass(ks, head is Head.SMOE, index)
    return img.astype(dtype, copy=False)
