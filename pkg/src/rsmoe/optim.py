"""Adam training drivers (global and rasterized) and expert re-estimation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._raster import N_GEOM, raster_pass
from .core import Head, KernelSet, RsmoeError, TileGrid, TileIndex, as_image
from .geometry import build_tile_index, global_index
from .grad import ParamGrads, forward

log = logging.getLogger(__name__)


class DivergedLoss(RsmoeError):
    def __init__(self, iteration, value):
        super().__init__(f"loss became {value} at iteration {iteration}")
        self.iteration = iteration


class ZeroGateMass(RsmoeError):
    def __init__(self, kernels, result=None):
        super().__init__(f"kernels with (near) zero gate mass: {list(kernels)}")
        self.kernels = list(kernels)
        self.result = result


@dataclass
class TrainConfig:
    iterations: int = 10000
    lr_mu: float = 0.01
    lr_mu_final: float = 1e-5
    lr_chol: float = 0.001
    lr_m: float = 0.001
    lr_logpi: float = 0.001
    tile: int = 16
    index_refresh: int = 500
    seed: int = 0
    head: Head = Head.SMOE
    rasterized: bool = True
    learnable_pi: bool = False
    grid_origin: tuple[int, int] = (0, 0)
    # off: tiles still restrict the kernel lists, but no per-pixel ellipse test
    pixel_cull: bool = True
    trace_every: int = 100
    # "normalized": center and Cholesky rates act on coordinates divided by
    # half the image extent per axis; "pixel": rates act on pixel units
    lr_frame: str = "normalized"

    def __post_init__(self):
        self.head = Head.parse(self.head)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr_mu", "lr_mu_final", "lr_chol", "lr_m", "lr_logpi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.index_refresh < 1 or self.trace_every < 1:
            raise ValueError("index_refresh and trace_every must be >= 1")
        if self.lr_frame not in ("normalized", "pixel"):
            raise ValueError(f"lr_frame must be 'normalized' or 'pixel', got {self.lr_frame!r}")


def lr_schedule(cfg: TrainConfig, t: float) -> float:
    """Center learning rate, exponential from ``lr_mu`` to ``lr_mu_final``."""
    return cfg.lr_mu * (cfg.lr_mu_final / cfg.lr_mu) ** (t / cfg.iterations)


@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))


def pack(ks: KernelSet) -> np.ndarray:
    return np.concatenate([ks.mu, ks.chol, ks.log_pi[:, None], ks.m], axis=1)


def unpack(packed: np.ndarray) -> KernelSet:
    return KernelSet(packed[:, 0:2], packed[:, 2:5], packed[:, 5], packed[:, N_GEOM:])


def _sync(ks: KernelSet, packed: np.ndarray):
    ks.mu[:] = packed[:, 0:2]
    ks.chol[:] = packed[:, 2:5]
    ks.log_pi[:] = packed[:, 5]
    ks.m[:] = packed[:, N_GEOM:]


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lrs) -> np.ndarray:
    """One bias-corrected Adam update of packed parameters, in place.

    ``lrs`` broadcasts against ``params`` (a per-column vector in practice).
    Cholesky diagonals (columns 2 and 4) are floored afterwards.
    """
    from .core import CHOL_FLOOR

    if isinstance(grads, ParamGrads):
        grads = grads.packed()
    if params.shape != grads.shape or state.m1.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m1 *= b1
    state.m1 += (1.0 - b1) * grads
    state.m2 *= b2
    state.m2 += (1.0 - b2) * (grads * grads)
    m_hat = state.m1 / (1.0 - b1 ** state.t)
    v_hat = state.m2 / (1.0 - b2 ** state.t)
    params -= np.asarray(lrs) * m_hat / (np.sqrt(v_hat) + state.eps)
    if params.shape[1] > 4:
        np.maximum(params[:, 2], CHOL_FLOOR, out=params[:, 2])
        np.maximum(params[:, 4], CHOL_FLOOR, out=params[:, 4])
    return params


def _lr_vector(cfg: TrainConfig, t: int, channels: int, width: int, height: int) -> np.ndarray:
    lrs = np.empty(N_GEOM + channels)
    lrs[0:2] = lr_schedule(cfg, t)
    lrs[2:5] = cfg.lr_chol
    if cfg.lr_frame == "normalized":
        # Adam is invariant to gradient scale, so stepping u = x / (W/2) is
        # stepping x with the rate times W/2; rows of L follow their axis
        sx, sy = 0.5 * width, 0.5 * height
        lrs[0] *= sx
        lrs[1] *= sy
        lrs[2] *= sx
        lrs[3:5] *= sy
    lrs[5] = cfg.lr_logpi if cfg.learnable_pi else 0.0
    lrs[N_GEOM:] = cfg.lr_m
    return lrs


@dataclass
class TrainResult:
    kernels: KernelSet
    # rows of (iteration, mse, psnr_db)
    trace: list = field(default_factory=list)
    index: TileIndex | None = None
    seconds: float = 0.0
    iteration_seconds: float = 0.0

    @property
    def final_mse(self) -> float:
        return self.trace[-1][1]


def _psnr_from_mse(mse):
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def train(target, cfg: TrainConfig, init: KernelSet, progress=None) -> TrainResult:
    """Fit ``init`` to ``target`` with Adam.

    Rasterized mode rebuilds the tile index at iteration 0 and every
    ``cfg.index_refresh`` iterations; global mode lets every pixel see every
    kernel.  The trace samples the loss every ``cfg.trace_every`` iterations
    plus once after the last update.
    """
    target = np.ascontiguousarray(as_image(target), dtype=np.float64)
    H, W, C = target.shape
    if init.channels != C:
        raise ValueError(f"init carries {init.channels} channels, target has {C}")
    ks = init.copy()
    packed = pack(ks)
    state = AdamState.zeros(packed.shape)
    grid = TileGrid(W, H, cfg.tile, tuple(cfg.grid_origin))
    smoe = cfg.head is Head.SMOE
    index = None if cfg.rasterized else global_index(ks, W, H)
    trace = []
    t_start = time.perf_counter()
    for it in range(cfg.iterations):
        if cfg.rasterized and it % cfg.index_refresh == 0:
            index = build_tile_index(ks, grid, pixel_cull=cfg.pixel_cull)
        _, sse, g = raster_pass(ks, smoe, index, target=target, want_grad=True)
        mse = float(sse.sum()) / target.size
        if not math.isfinite(mse):
            raise DivergedLoss(it, mse)
        if it % cfg.trace_every == 0:
            trace.append((it, mse, _psnr_from_mse(mse)))
            if progress is not None:
                progress(it, mse)
        adam_step(state, packed, g, _lr_vector(cfg, it, C, W, H))
        _sync(ks, packed)
    elapsed = time.perf_counter() - t_start
    if cfg.rasterized:
        index = build_tile_index(ks, grid, pixel_cull=cfg.pixel_cull)
    mse, _, _ = forward(ks, cfg.head, target, index)
    if not math.isfinite(mse):
        raise DivergedLoss(cfg.iterations, mse)
    trace.append((cfg.iterations, mse, _psnr_from_mse(mse)))
    return TrainResult(ks, trace, index, elapsed, elapsed / cfg.iterations)


def gate_moments(ks: KernelSet, target, index: TileIndex | None = None):
    """Per-kernel gate mass ``sum_x w_j(x)`` and ``sum_x w_j(x) y(x)``.

    Reuses the gradient pass: with all experts at zero the expert gradient
    is ``-2/N * sum_x w_j(x) t(x)``, so a constant target of -1 yields the
    mass and the real target yields the weighted sums.
    """
    target = np.ascontiguousarray(as_image(target), dtype=np.float64)
    H, W, C = target.shape
    if index is None:
        index = global_index(ks, W, H)
    probe = KernelSet(ks.mu, ks.chol, ks.log_pi, np.zeros((len(ks), C)))
    scale = target.size / 2.0
    _, _, g_mass = raster_pass(probe, True, index, target=-np.ones_like(target), want_grad=True)
    _, _, g_sum = raster_pass(probe, True, index, target=target, want_grad=True)
    mass = g_mass[:, N_GEOM] * scale
    sums = -g_sum[:, N_GEOM:] * scale
    return mass, sums


def estimate_expert_means(ks: KernelSet, target, index: TileIndex | None = None,
                          strict: bool = True, min_mass: float = 1e-9) -> KernelSet:
    """Closed-form expert values: gate-weighted mean of the target per kernel.

    Kernels whose gate mass is below ``min_mass`` keep their value; with
    ``strict`` a :class:`ZeroGateMass` naming them is raised (the partial
    result rides on the exception).
    """
    mass, sums = gate_moments(ks, target, index)
    out = ks.copy()
    ok = mass >= min_mass
    out.m[ok] = sums[ok] / mass[ok, None]
    bad = np.flatnonzero(~ok)
    if len(bad):
        if strict:
            raise ZeroGateMass(bad.tolist(), result=out)
        log.warning("left %d kernels with zero gate mass unchanged", len(bad))
    return out


def estimation_variance(gate_mass: float, noise_var: float, hypotheses: int = 1,
                        model_noise_var: float = 0.0) -> float:
    """Expert-estimate variance ``noise_var / M + model_noise_var / H``."""
    if gate_mass <= 0 or hypotheses < 1 or noise_var < 0 or model_noise_var < 0:
        raise ValueError("need gate_mass > 0, hypotheses >= 1, non-negative variances")
    return noise_var / gate_mass + model_noise_var / hypotheses
