"""Region-growing segmentation and segment-aware kernel initialization."""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .core import INIT_SCALE, KernelSet, RsmoeError, as_image


class TooFewKernels(RsmoeError):
    pass


@dataclass
class SegmentMap:
    labels: np.ndarray  # (H, W) int64, ids 0..N-1
    sizes: np.ndarray   # (N,) pixel counts

    @property
    def count(self) -> int:
        return len(self.sizes)

    def means(self, img) -> np.ndarray:
        img = as_image(img)
        flat = self.labels.ravel()
        sums = np.stack([np.bincount(flat, img[:, :, c].ravel(), self.count)
                         for c in range(img.shape[2])], axis=1)
        return sums / self.sizes[:, None]


def _grow(img255, threshold):
    H, W, C = img255.shape
    labels = np.full((H, W), -1, dtype=np.int64)
    sums, counts = [], []
    n = 0
    for r0 in range(H):
        for c0 in range(W):
            if labels[r0, c0] >= 0:
                continue
            labels[r0, c0] = n
            total = img255[r0, c0].copy()
            cnt = 1
            queue = deque([(r0, c0)])
            while queue:
                r, c = queue.popleft()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < H and 0 <= cc < W and labels[rr, cc] < 0:
                        px = img255[rr, cc]
                        if np.max(np.abs(px - total / cnt)) <= threshold:
                            labels[rr, cc] = n
                            total += px
                            cnt += 1
                            queue.append((rr, cc))
            sums.append(total)
            counts.append(cnt)
            n += 1
    return labels, np.array(sums).reshape(n, C), np.array(counts, dtype=np.int64)


def _adjacency(labels):
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    p = np.concatenate(pairs)
    p = np.concatenate([p, p[:, ::-1]])
    p = np.unique(p, axis=0)
    nbrs: dict[int, set] = {}
    for u, v in p.tolist():
        nbrs.setdefault(u, set()).add(v)
    return nbrs


def _merge_small(labels, sums, counts, min_size):
    n = len(counts)
    if n == 1 or min_size <= 1:
        return labels
    nbrs = _adjacency(labels)
    parent = np.arange(n)
    sums = sums.astype(np.float64).copy()
    counts = counts.copy()
    heap = [(int(counts[i]), i) for i in range(n) if counts[i] < min_size]
    heapq.heapify(heap)
    alive = n
    while heap and alive > 1:
        size, a = heapq.heappop(heap)
        if parent[a] != a or counts[a] != size or size >= min_size:
            continue
        mean_a = sums[a] / counts[a]
        best = min(nbrs[a], key=lambda b: (float(np.max(np.abs(sums[b] / counts[b] - mean_a))), b))
        parent[a] = best
        sums[best] += sums[a]
        counts[best] += counts[a]
        for v in nbrs.pop(a):
            nbrs[v].discard(a)
            if v != best:
                nbrs[v].add(best)
                nbrs[best].add(v)
        alive -= 1
        if counts[best] < min_size:
            heapq.heappush(heap, (int(counts[best]), best))
    # resolve chains
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    return root[labels]


def _relabel(labels):
    # contiguous ids in order of first appearance in row-major scan
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(flat.max() + 1, dtype=np.int64)
    remap[np.unique(flat)[order]] = np.arange(len(order))
    out = remap[labels]
    return out, np.bincount(out.ravel())


def segment_image(img, threshold: float = 10.0, min_size: int = 16,
                  smooth_sigma: float = 0.0) -> SegmentMap:
    """Mean-tracking 4-connected region growing.

    A pixel joins the region being grown when its largest per-channel
    difference to the region's running mean, on the 0-255 scale, is at most
    ``threshold``.  Seeds are taken in row-major order.  Regions smaller than
    ``min_size`` are then merged, smallest first, into the 4-adjacent region
    with the closest mean.  ``smooth_sigma`` > 0 grows regions on a
    Gaussian-blurred copy, which keeps noisy inputs from shattering.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    img = as_image(img).astype(np.float64)
    if smooth_sigma > 0:
        img = gaussian_filter(img, sigma=(smooth_sigma, smooth_sigma, 0), mode="nearest")
    labels, sums, counts = _grow(img * 255.0, float(threshold))
    labels = _merge_small(labels, sums, counts, int(min_size))
    labels, sizes = _relabel(labels)
    return SegmentMap(labels, sizes)


def kernel_counts(sizes, L: int, mode: str = "proportional") -> np.ndarray:
    """Kernels per segment summing to exactly ``L``.

    ``proportional``: ``max(1, round(L * size / total))`` then unit
    corrections, each going to the segment furthest from its quota (ties to
    the larger segment when adding, the smaller when removing), which keeps
    counts monotone in segment size.  ``equal``: ``L / N`` per segment with
    the remainder going to the largest segments.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    N = len(sizes)
    if L < N:
        raise TooFewKernels(f"{L} kernels cannot cover {N} segments")
    if mode == "equal":
        quota = np.full(N, L / N)
    elif mode == "proportional":
        quota = L * sizes / sizes.sum()
    else:
        raise ValueError(f"unknown allocation mode {mode!r}")
    counts = np.maximum(1, np.floor(quota + 0.5)).astype(np.int64)
    # rank used to break ties: larger segment first, then lower id
    rank = np.lexsort((np.arange(N), -sizes))
    pos = np.empty(N, dtype=np.int64)
    pos[rank] = np.arange(N)
    diff = L - int(counts.sum())
    while diff > 0:
        deficit = quota - counts
        j = min(range(N), key=lambda i: (-deficit[i], pos[i]))
        counts[j] += 1
        diff -= 1
    while diff < 0:
        excess = np.where(counts > 1, counts - quota, -np.inf)
        j = min(range(N), key=lambda i: (-excess[i], -pos[i]))
        counts[j] -= 1
        diff += 1
    return counts


def allocate_kernels(seg: SegmentMap, img, L: int, seed: int = 0, scale: float = INIT_SCALE,
                     mode: str = "proportional") -> KernelSet:
    """Place kernels inside segments; experts start at the segment mean color."""
    img = as_image(img).astype(np.float64)
    counts = kernel_counts(seg.sizes, L, mode)
    rng = np.random.default_rng(seed)
    means = seg.means(img)
    order = np.argsort(seg.labels.ravel(), kind="stable")
    starts = np.concatenate([[0], np.cumsum(seg.sizes)])
    W = img.shape[1]
    mus, ms = [], []
    for j, k in enumerate(counts):
        pix = order[starts[j]:starts[j + 1]]
        pick = rng.choice(pix, size=int(k), replace=k > len(pix))
        mus.append(np.stack([pick % W, pick // W], axis=1).astype(np.float64))
        ms.append(np.repeat(means[j][None, :], k, axis=0))
    return KernelSet.isotropic(np.concatenate(mus), np.concatenate(ms), scale)


def wl_scale(width: int, L: int) -> float:
    """Alternative initial bandwidth ``W / L``."""
    return width / L


def random_init(img, L: int, seed: int = 0, scale: float = INIT_SCALE) -> KernelSet:
    """Uniform centers over the image; experts copy the nearest pixel."""
    if L < 1:
        raise ValueError("L must be >= 1")
    img = as_image(img).astype(np.float64)
    H, W, _ = img.shape
    rng = np.random.default_rng(seed)
    mu = np.stack([rng.uniform(0, W - 1, L), rng.uniform(0, H - 1, L)], axis=1)
    rows = np.clip(np.floor(mu[:, 1] + 0.5).astype(int), 0, H - 1)
    cols = np.clip(np.floor(mu[:, 0] + 0.5).astype(int), 0, W - 1)
    return KernelSet.isotropic(mu, img[rows, cols], scale)


def segment_png(seg: SegmentMap, path, seed: int = 0):
    """Write the label map as an indexed-color PNG (ids wrap at 256)."""
    rng = np.random.default_rng(seed)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    im = Image.fromarray((seg.labels % 256).astype(np.uint8), mode="P")
    im.putpalette(palette.ravel().tolist())
    im.save(path, format="PNG")
