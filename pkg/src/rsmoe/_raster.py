"""Tile-parallel forward/backward kernels.

Both backends compute, for every pixel of every requested tile, the squared
Mahalanobis distance to each kernel listed for that tile, cull kernels with
``d2 > cull2`` (all listed kernels are used when culling leaves none), and
evaluate either head.  Gradients are written per (tile, listed kernel) into a
CSR-aligned buffer and merged in ascending tile order, so the result does not
depend on how tiles are scheduled across threads.

Gradient columns: 0 mu_x, 1 mu_y, 2 l11, 3 l21, 4 l22, 5 log_pi, 6.. m.
"""
from __future__ import annotations

import math

import numpy as np

from . import _backend
from ._backend import njit, prange

N_GEOM = 6
# no nnan/ninf: the global path relies on an infinite cull radius
_FASTMATH = {"arcp", "afn", "contract", "reassoc"}


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _pass_numba(mu, chol, log_pi, m, target, has_target, width, tile, ox, oy, nx, height,
                block_ptr, block_kernels, block_list, cull2, smoe, want_grad, grad_scale,
                out, sse, gbuf):
    C = m.shape[1]
    finite_cull = cull2 < math.inf
    cull_r = math.sqrt(cull2) * (1.0 + 1e-9) + 1e-9 if finite_cull else math.inf

    for bi in prange(block_list.shape[0]):
        n = block_list[bi]
        p0 = block_ptr[n]
        nk = block_ptr[n + 1] - p0
        by = n // nx
        bx = n - by * nx
        c0 = max(bx * tile - ox, 0)
        c1 = min((bx + 1) * tile - ox, width)
        r0 = max(by * tile - oy, 0)
        r1 = min((by + 1) * tile - oy, height)

        # tile-local copies of the listed kernels
        kmx = np.empty(nk)
        kmy = np.empty(nk)
        ki11 = np.empty(nk)
        kl21 = np.empty(nk)
        ki22 = np.empty(nk)
        kex = np.empty(nk)
        key = np.empty(nk)
        klp = np.empty(nk)
        km = np.empty((nk, C))
        for k in range(nk):
            j = block_kernels[p0 + k]
            kmx[k] = mu[j, 0]
            kmy[k] = mu[j, 1]
            ki11[k] = 1.0 / chol[j, 0]
            kl21[k] = chol[j, 1]
            ki22[k] = 1.0 / chol[j, 2]
            # axis-aligned half extents of the cull ellipse
            kex[k] = cull_r * chol[j, 0]
            key[k] = cull_r * math.sqrt(chol[j, 1] * chol[j, 1] + chol[j, 2] * chol[j, 2])
            klp[k] = log_pi[j]
            for ch in range(C):
                km[k, ch] = m[j, ch]

        row_ids = np.empty(nk, dtype=np.int64)
        act = np.empty(nk, dtype=np.int64)
        az1 = np.empty(nk)
        az2 = np.empty(nk)
        vals = np.empty(nk)
        y = np.empty(C)
        g = np.zeros(C)
        acc = 0.0

        for r in range(r0, r1):
            yf = float(r)
            nrow = 0
            for k in range(nk):
                if abs(yf - kmy[k]) <= key[k]:
                    row_ids[nrow] = k
                    nrow += 1
            for c in range(c0, c1):
                xf = float(c)
                cnt = 0
                for t in range(nrow):
                    k = row_ids[t]
                    dx = xf - kmx[k]
                    if abs(dx) > kex[k]:
                        continue
                    z1 = dx * ki11[k]
                    z2 = (yf - kmy[k] - kl21[k] * z1) * ki22[k]
                    d2 = z1 * z1 + z2 * z2
                    if d2 <= cull2:
                        act[cnt] = k
                        az1[cnt] = z1
                        az2[cnt] = z2
                        vals[cnt] = d2
                        cnt += 1
                if cnt == 0:
                    # nothing survives the ellipse test: use the whole list
                    for k in range(nk):
                        z1 = (xf - kmx[k]) * ki11[k]
                        z2 = (yf - kmy[k] - kl21[k] * z1) * ki22[k]
                        act[k] = k
                        az1[k] = z1
                        az2[k] = z2
                        vals[k] = z1 * z1 + z2 * z2
                    cnt = nk

                ka = act[0]
                if smoe:
                    amax = -math.inf
                    for t in range(cnt):
                        a = klp[act[t]] - 0.5 * vals[t]
                        vals[t] = a
                        if a > amax:
                            amax = a
                            ka = act[t]
                    den = 0.0
                    for t in range(cnt):
                        e = math.exp(vals[t] - amax)
                        vals[t] = e
                        den += e
                    inv_den = 1.0 / den
                    for t in range(cnt):
                        vals[t] *= inv_den
                else:
                    for t in range(cnt):
                        vals[t] = math.exp(-0.5 * vals[t])

                if smoe:
                    # offsets from the dominant expert: exact when all experts agree
                    for ch in range(C):
                        y[ch] = 0.0
                    for t in range(cnt):
                        k = act[t]
                        v = vals[t]
                        for ch in range(C):
                            y[ch] += v * (km[k, ch] - km[ka, ch])
                    for ch in range(C):
                        y[ch] += km[ka, ch]
                else:
                    for ch in range(C):
                        y[ch] = 0.0
                    for t in range(cnt):
                        k = act[t]
                        v = vals[t]
                        for ch in range(C):
                            y[ch] += v * km[k, ch]
                for ch in range(C):
                    out[r, c, ch] = y[ch]

                if has_target:
                    for ch in range(C):
                        diff = y[ch] - target[r, c, ch]
                        acc += diff * diff
                        g[ch] = grad_scale * diff

                if want_grad:
                    for t in range(cnt):
                        k = act[t]
                        q = p0 + k
                        v = vals[t]
                        s = 0.0
                        if smoe:
                            for ch in range(C):
                                gbuf[q, N_GEOM + ch] += g[ch] * v
                                s += g[ch] * (km[k, ch] - y[ch])
                            da = v * s
                            gbuf[q, 5] += da
                            dd2 = -0.5 * da
                        else:
                            for ch in range(C):
                                gbuf[q, N_GEOM + ch] += g[ch] * v
                                s += g[ch] * km[k, ch]
                            dd2 = -0.5 * v * s
                        z1 = az1[t]
                        z2 = az2[t]
                        i11 = ki11[k]
                        i22 = ki22[k]
                        l21 = kl21[k]
                        gbuf[q, 0] += dd2 * (-2.0 * (z1 - z2 * l21 * i22) * i11)
                        gbuf[q, 1] += dd2 * (-2.0 * z2 * i22)
                        gbuf[q, 2] += dd2 * (2.0 * z1 * i11 * (z2 * l21 * i22 - z1))
                        gbuf[q, 3] += dd2 * (-2.0 * z1 * z2 * i22)
                        gbuf[q, 4] += dd2 * (-2.0 * z2 * z2 * i22)
        sse[n] = acc


@njit(cache=True)
def _merge_numba(block_ptr, block_kernels, block_list, gbuf, grads):
    for bi in range(block_list.shape[0]):
        n = block_list[bi]
        for q in range(block_ptr[n], block_ptr[n + 1]):
            j = block_kernels[q]
            for col in range(gbuf.shape[1]):
                grads[j, col] += gbuf[q, col]


def _pass_numpy(mu, chol, log_pi, m, target, has_target, width, tile, ox, oy, nx, height,
                block_ptr, block_kernels, block_list, cull2, smoe, want_grad, grad_scale,
                out, sse, gbuf):
    C = m.shape[1]
    for n in block_list:
        p0, p1 = block_ptr[n], block_ptr[n + 1]
        ids = block_kernels[p0:p1]
        by, bx = divmod(int(n), nx)
        c0, c1 = max(bx * tile - ox, 0), min((bx + 1) * tile - ox, width)
        r0, r1 = max(by * tile - oy, 0), min((by + 1) * tile - oy, height)
        rr, cc = np.meshgrid(np.arange(r0, r1, dtype=np.float64),
                             np.arange(c0, c1, dtype=np.float64), indexing="ij")
        xs, ys = cc.ravel(), rr.ravel()
        l11, l21, l22 = chol[ids, 0], chol[ids, 1], chol[ids, 2]
        z1 = (xs[:, None] - mu[ids, 0]) / l11
        z2 = (ys[:, None] - mu[ids, 1] - l21 * z1) / l22
        d2 = z1 * z1 + z2 * z2
        act = d2 <= cull2
        act[~act.any(axis=1)] = True
        if smoe:
            a = np.where(act, log_pi[ids] - 0.5 * d2, -np.inf)
            e = np.exp(a - a.max(axis=1, keepdims=True))
            v = e / e.sum(axis=1, keepdims=True)
            # offsets from the dominant expert: exact when all experts agree
            anchor = m[ids][np.argmax(a, axis=1)]
            y = anchor + np.einsum("pk,pkc->pc", v, m[ids][None, :, :] - anchor[:, None, :])
        else:
            v = np.where(act, np.exp(-0.5 * d2), 0.0)
            y = v @ m[ids]
        out[r0:r1, c0:c1, :] = y.reshape(r1 - r0, c1 - c0, C)
        if has_target:
            diff = y - target[r0:r1, c0:c1, :].reshape(-1, C)
            sse[n] = float(np.sum(diff * diff))
            g = grad_scale * diff
        if want_grad:
            gb = gbuf[p0:p1]
            gb[:, N_GEOM:] += v.T @ g
            if smoe:
                s = g @ m[ids].T - np.sum(g * y, axis=1, keepdims=True)
                da = v * s
                gb[:, 5] += da.sum(axis=0)
                dd2 = -0.5 * da
            else:
                dd2 = -0.5 * v * (g @ m[ids].T)
            i11, i22 = 1.0 / l11, 1.0 / l22
            gb[:, 0] += np.sum(dd2 * (-2.0 * (z1 - z2 * l21 * i22) * i11), axis=0)
            gb[:, 1] += np.sum(dd2 * (-2.0 * z2 * i22), axis=0)
            gb[:, 2] += np.sum(dd2 * (2.0 * z1 * i11 * (z2 * l21 * i22 - z1)), axis=0)
            gb[:, 3] += np.sum(dd2 * (-2.0 * z1 * z2 * i22), axis=0)
            gb[:, 4] += np.sum(dd2 * (-2.0 * z2 * z2 * i22), axis=0)


def _merge_numpy(block_ptr, block_kernels, block_list, gbuf, grads):
    for n in block_list:
        p0, p1 = block_ptr[n], block_ptr[n + 1]
        # ids within one tile are unique, so fancy-index accumulation is safe
        grads[block_kernels[p0:p1]] += gbuf[p0:p1]


def raster_pass(ks, smoe, index, target=None, want_grad=False, blocks=None, backend=None):
    """Evaluate the model tile by tile.

    Returns ``(image, sse_per_block, grads)``; ``image`` is float64 (H, W, C),
    ``grads`` is ``None`` unless ``want_grad``.  Gradients are of the mean
    squared error over all pixels and channels of the full image, restricted
    to the contribution of the processed tiles.
    """
    grid = index.grid
    H, W, C = grid.height, grid.width, ks.channels
    if blocks is None:
        block_list = np.arange(grid.n_blocks, dtype=np.int64)
    else:
        block_list = np.unique(np.asarray(blocks, dtype=np.int64))
    has_target = target is not None
    if has_target:
        target = np.ascontiguousarray(target, dtype=np.float64)
        if target.shape != (H, W, C):
            raise ValueError(f"target shape {target.shape} does not match model ({H}, {W}, {C})")
    elif want_grad:
        raise ValueError("gradients need a target")
    else:
        target = np.zeros((1, 1, C))
    out = np.zeros((H, W, C))
    sse = np.zeros(grid.n_blocks)
    nnz = len(index.block_kernels) if want_grad else 0
    gbuf = np.zeros((nnz, N_GEOM + C))
    grad_scale = 2.0 / (H * W * C)
    use_numba = _backend.USE_NUMBA if backend is None else backend == "numba"
    fn = _pass_numba if use_numba else _pass_numpy
    ox, oy = grid.origin
    fn(ks.mu, ks.chol, ks.log_pi, ks.m, target, has_target, W, grid.tile, ox, oy, grid.nx, H,
       index.block_ptr, index.block_kernels, block_list, float(index.cull2), bool(smoe),
       bool(want_grad), grad_scale, out, sse, gbuf)
    grads = None
    if want_grad:
        grads = np.zeros((len(ks), N_GEOM + C))
        (_merge_numba if use_numba else _merge_numpy)(
            index.block_ptr, index.block_kernels, block_list, gbuf, grads)
    return out, sse, grads
