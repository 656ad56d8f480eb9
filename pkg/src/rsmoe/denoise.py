"""Noise synthesis, shifted-grid multi-model denoising and the 1D step benchmark."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import RsmoeError, TileGrid, as_image
from .optim import TrainConfig, train
from .render import render_image
from .segment import allocate_kernels, random_init, segment_image

log = logging.getLogger(__name__)

# default noise sd of the 1D benchmark: the level at which the 2-kernel SMoE
# fit averages 27 dB over 40 draws (seed 0); the source gives no value
BENCH1D_NOISE_SD = 0.155
BENCH1D_RUNS = 20


def add_gaussian_noise(img, variance: float, seed: int = 0) -> np.ndarray:
    """i.i.d. zero-mean Gaussian noise; the result is not clamped."""
    if variance < 0:
        raise ValueError("variance must be >= 0")
    img = as_image(img).astype(np.float64)
    if variance == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return img + rng.normal(0.0, math.sqrt(variance), img.shape)


def offset_lattice(hypotheses: int, tile: int = 16) -> list[tuple[int, int]]:
    """Grid origins ``{0, s, 2s, ...}^2`` with stride ``s = tile / sqrt(H)``."""
    side = math.isqrt(hypotheses)
    if hypotheses < 1 or side * side != hypotheses or tile % side:
        raise ValueError(f"hypothesis count {hypotheses} must be a square whose root divides {tile}")
    step = tile // side
    return [(dx * step, dy * step) for dy in range(side) for dx in range(side)]


@dataclass
class HypothesisStack:
    images: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def check(self):
        if not self.images:
            raise ValueError("empty hypothesis stack")
        shape = self.images[0].shape
        if any(im.shape != shape for im in self.images):
            raise ValueError("hypotheses differ in shape")


def fuse(stack) -> np.ndarray:
    """Per-pixel, per-channel mean of the hypotheses (unclamped).

    Values are sorted per pixel before summing, so the result does not
    depend on the order of the hypotheses, bit for bit.
    """
    images = stack.images if isinstance(stack, HypothesisStack) else list(stack)
    if not images:
        raise ValueError("need at least one hypothesis")
    images = [as_image(im).astype(np.float64) for im in images]
    if any(im.shape != images[0].shape for im in images):
        raise ValueError("hypotheses differ in shape")
    cube = np.sort(np.stack(images), axis=0)
    return np.sum(cube, axis=0) / len(images)


def model_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def train_multi_model(noisy, cfg: TrainConfig, hypotheses: int, kernels: int,
                      init: str = "segment", seg_threshold: float = 10.0,
                      seg_smooth: float = 2.0, seg_min_size: int | None = None,
                      allocation: str = "proportional", offsets=None,
                      progress=None) -> HypothesisStack:
    """Train one rasterized model per grid offset and render each fully.

    Every model sees the whole image; only its tile partition is shifted.
    ``seg_min_size=None`` uses ``max(16, ceil(H*W / kernels))`` so that every
    segment spans at least one kernel's share of pixels (and there are never
    more segments than kernels).
    A model that fails is skipped with a warning; if all fail the last
    error is raised.
    """
    noisy = as_image(noisy).astype(np.float64)
    H, W, _ = noisy.shape
    if offsets is None:
        offsets = offset_lattice(hypotheses, cfg.tile)
    seg = None
    if init == "segment":
        if seg_min_size is None:
            seg_min_size = max(16, -(-H * W // kernels))
        seg = segment_image(noisy, seg_threshold, seg_min_size, smooth_sigma=seg_smooth)
    elif init != "random":
        raise ValueError(f"unknown init {init!r}")
    stack = HypothesisStack()
    last_err = None
    for h, (off, s) in enumerate(zip(offsets, model_seeds(cfg.seed, len(offsets)))):
        t0 = time.perf_counter()
        ks0 = (allocate_kernels(seg, noisy, kernels, s, mode=allocation) if seg is not None
               else random_init(noisy, kernels, s))
        mcfg = replace(cfg, seed=s, grid_origin=tuple(off), rasterized=True)
        try:
            res = train(noisy, mcfg, ks0)
        except RsmoeError as exc:
            log.warning("hypothesis %d (offset %s) failed: %s", h, off, exc)
            last_err = exc
            continue
        grid = TileGrid(W, H, cfg.tile, tuple(off))
        stack.images.append(render_image(res.kernels, cfg.head, grid, res.index, dtype=np.float64))
        stack.offsets.append(tuple(off))
        stack.seconds.append(time.perf_counter() - t0)
        if progress is not None:
            progress(h, stack.images[-1])
    if not stack.images:
        raise last_err
    return stack


# 1D step benchmark

def step_signal(n: int = 21, low: float = 0.1, high: float = 0.9) -> np.ndarray:
    """``n`` samples with one transition after the middle sample."""
    y = np.full(n, low)
    y[n // 2 + 1:] = high
    return y


def _eval1d(mu, scale, m, x, smoe):
    # batched over the leading axis: mu, scale, m are (R, L), x is (n,)
    d = (x[None, :, None] - mu[:, None, :]) / scale[:, None, :]
    a = -0.5 * d * d
    if smoe:
        e = np.exp(a - a.max(axis=2, keepdims=True))
        w = e / e.sum(axis=2, keepdims=True)
    else:
        w = np.exp(a)
    return d, w, np.einsum("rnl,rl->rn", w, m)


def fit1d(x, target, L: int, smoe: bool, iterations: int = 3000, lr: float = 0.01):
    """Fit ``L`` 1D Gaussian kernels with Adam; returns ``(mu, scale, m)``.

    ``target`` is (n,) or a batch (R, n) of independent signals fitted in
    lockstep.  Kernels start evenly spaced with a width of half their
    spacing and experts at the nearest sample.  Rates apply to unit sample
    spacing.
    """
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    single = target.ndim == 1
    target = np.atleast_2d(target)
    R, n = target.shape
    spacing = (x[-1] - x[0] + 1) / L
    mu = np.tile(x[0] - 0.5 + spacing * (np.arange(L) + 0.5), (R, 1))
    scale = np.full((R, L), 0.5 * spacing)
    m = target[:, np.clip(np.rint(mu[0] - x[0]).astype(int), 0, n - 1)].copy()
    p = np.stack([mu, scale, m])
    m1 = np.zeros_like(p)
    m2 = np.zeros_like(p)
    for t in range(1, iterations + 1):
        mu, scale, m = p
        d, w, y = _eval1d(mu, scale, m, x, smoe)
        g = 2.0 * (y - target) / n
        dm = np.einsum("rn,rnl->rl", g, w)
        if smoe:
            da = w * (m[:, None, :] - y[:, :, None]) * g[:, :, None]
        else:
            da = w * m[:, None, :] * g[:, :, None]
        # a = -d^2/2, d = (x - mu) / scale
        dmu = np.sum(da * d, axis=1) / scale
        dscale = np.sum(da * d * d, axis=1) / scale
        grad = np.stack([dmu, dscale, dm])
        m1 = 0.9 * m1 + 0.1 * grad
        m2 = 0.999 * m2 + 0.001 * grad * grad
        p -= lr * (m1 / (1 - 0.9 ** t)) / (np.sqrt(m2 / (1 - 0.999 ** t)) + 1e-8)
        np.maximum(p[1], 1e-3, out=p[1])
    out = tuple(p[k].copy() for k in range(3))
    return tuple(a[0] for a in out) if single else out


def predict1d(params, x, smoe):
    mu, scale, m = (np.atleast_2d(a) for a in params)
    y = _eval1d(mu, scale, m, np.asarray(x, dtype=np.float64), smoe)[2]
    return y[0] if np.ndim(params[0]) == 1 else y


def psnr1d(a, b) -> float:
    err = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return math.inf if err == 0 else 10.0 * math.log10(1.0 / err)


@dataclass
class Bench1D:
    noise_sd: float
    seed: int
    runs: int
    # mean PSNR over the noise draws, dB
    smoe2: float
    rbf6: float
    rbf2: float
    seconds: float
    per_run: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [
            f"noise_sd,{self.noise_sd:g}",
            f"seed,{self.seed}",
            f"runs,{self.runs}",
            f"smoe_2_kernels_psnr_db,{self.smoe2:.4f}",
            f"rbf_6_kernels_psnr_db,{self.rbf6:.4f}",
            f"rbf_2_kernels_psnr_db,{self.rbf2:.4f}",
            f"seconds,{self.seconds:.3f}",
        ]


def bench1d(noise_sd: float = BENCH1D_NOISE_SD, seed: int = 0, runs: int = BENCH1D_RUNS,
            iterations: int = 3000) -> Bench1D:
    """Fit noisy 21-sample steps with 2 SMoE, 6 RBF and 2 RBF kernels.

    ``runs`` independent noise draws are fitted together; reported PSNRs
    (against the clean step) are averaged over the draws.
    """
    if noise_sd < 0 or runs < 1:
        raise ValueError("need noise_sd >= 0 and runs >= 1")
    t0 = time.perf_counter()
    clean = step_signal()
    x = np.arange(len(clean), dtype=np.float64)
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0.0, noise_sd, (runs, len(clean))) if noise_sd > 0 else np.tile(clean, (runs, 1))
    per_run = {}
    for name, L, smoe in (("smoe2", 2, True), ("rbf6", 6, False), ("rbf2", 2, False)):
        y = predict1d(fit1d(x, noisy, L, smoe, iterations), x, smoe)
        per_run[name] = np.array([psnr1d(row, clean) for row in y])
    return Bench1D(noise_sd, seed, runs, *(float(per_run[k].mean()) for k in ("smoe2", "rbf6", "rbf2")),
                   time.perf_counter() - t0, per_run)
