"""Time the tile pass (forward + gradient) under the numba and numpy backends.

    python benchmarks/bench_backends.py [--kernels 500,2500] [--size 256] [--repeat 5]

Both backends run in this process through the ``backend=`` switch of
``raster_pass``; the first numba call (JIT compile or cache load) is
excluded from the timings.  Prints one CSV row per configuration.
"""
import argparse
import csv
import sys
import time

import numpy as np

from rsmoe._raster import raster_pass
from rsmoe.core import TileGrid
from rsmoe.geometry import build_tile_index, global_index
from rsmoe.segment import random_init


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kernels", default="500,2500")
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--global-kernels", type=int, default=200,
                    help="pool size for the untiled comparison (it scales with pixels x kernels)")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    S = args.size
    target = rng.uniform(0, 1, (S, S, 3))
    grid = TileGrid(S, S, 16)
    w = csv.writer(sys.stdout)
    w.writerow(["kernels", "index", "backend", "seconds", "speedup_vs_numpy"])

    cases = [(int(L), "tiled") for L in args.kernels.split(",")] + [(args.global_kernels, "global")]
    for L, kind in cases:
        ks = random_init(target, L, seed=1)
        idx = build_tile_index(ks, grid) if kind == "tiled" else global_index(ks, S, S)
        raster_pass(ks, True, idx, target, True, backend="numba")  # compile / load cache
        t = {}
        for backend in ("numba", "numpy"):
            reps = args.repeat if backend == "numba" else max(1, args.repeat // 2)
            t[backend] = best_of(lambda: raster_pass(ks, True, idx, target, True, backend=backend), reps)
        for backend in ("numba", "numpy"):
            w.writerow([L, kind, backend, f"{t[backend]:.4f}", f"{t['numpy'] / t[backend]:.1f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
