import math

import numpy as np
import pytest

from rsmoe.core import Chol2, EmptySubset, Head, Kernel, KernelSet, TileGrid
from rsmoe.geometry import build_tile_index
from rsmoe.render import gates_at, kernel_eval, render_image, render_point

from conftest import random_kernels


def k(mu, chol=(1, 0, 1), m=(0.5,), log_pi=0.0):
    return Kernel(mu=tuple(map(float, mu)), chol=Chol2(*map(float, chol)), log_pi=log_pi,
                  m=tuple(map(float, m)))


@pytest.mark.parametrize("chol, x, expected", [
    ((1, 0, 1), (0, 0), 1.0),
    ((1, 0, 1), (1, 0), math.exp(-0.5)),
    ((2, 0, 1), (2, 0), math.exp(-0.5)),
])
def test_kernel_eval(chol, x, expected):
    assert math.isclose(kernel_eval(k((0, 0), chol), x), expected, rel_tol=1e-12)
    assert math.isclose(math.exp(-0.5), 0.60653, abs_tol=1e-5)


def test_gates_symmetric_pair():
    g = gates_at([k((1, 2)), k((1, 2))], (7, -3))
    np.testing.assert_allclose(g.w, [0.5, 0.5])


def test_gates_singleton():
    np.testing.assert_array_equal(gates_at([k((3, 3))], (100, -50)).w, [1.0])


def test_gates_far_pair():
    g = gates_at([k((0, 0)), k((10, 0))], (0, 0))
    assert math.isclose(g.w[0], 1 / (1 + math.exp(-50)), rel_tol=1e-15)
    assert math.isclose(g.w[1], math.exp(-50), rel_tol=1e-9)


def test_gates_survive_extreme_distance():
    # raw exponents far below -700 would underflow without the max shift
    g = gates_at([k((0, 0)), k((1, 0))], (1000, 0))
    assert np.all(np.isfinite(g.w)) and math.isclose(g.w.sum(), 1.0)
    assert g.w[1] > g.w[0]


def test_gate_invariance_under_log_pi_shift(rng):
    ks = random_kernels(rng, 12, width=20, height=20, log_pi_sd=1.0)
    kernels = [ks[j] for j in range(len(ks))]
    for _ in range(20):
        x = rng.uniform(0, 20, 2)
        a = gates_at(kernels, x).w
        b = gates_at(kernels, x, log_pis=ks.log_pi + 3.7).w
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_partition_of_unity_random(rng):
    for _ in range(300):
        n = int(rng.integers(2, 51))
        ks = random_kernels(rng, n, width=30, height=30, scale=(0.3, 8), shear=4, log_pi_sd=1.0)
        x = rng.uniform(-5, 35, 2)
        w = gates_at(ks, x).w
        assert np.all(w >= 0)
        assert abs(w.sum() - 1) <= 1e-6


def test_render_point_examples():
    assert render_point([k((4, 4), m=(0.8,))], "smoe", (-9, 2))[0] == pytest.approx(0.8)
    pair = [k((-5, 0), m=(0.1,)), k((5, 0), m=(0.9,))]
    assert render_point(pair, "smoe", (0, 0))[0] == pytest.approx(0.5, abs=1e-12)
    one = [k((2, 3), m=(0.8,))]
    assert render_point(one, "rbf", (2, 3))[0] == pytest.approx(0.8)
    assert render_point(one, "rbf", (3, 3))[0] == pytest.approx(0.8 * math.exp(-0.5), abs=1e-12)
    assert render_point(one, "rbf", (3, 3))[0] == pytest.approx(0.48522, abs=1e-5)


def test_render_point_subset_normalizes_over_subset():
    ks = [k((0, 0), m=(0.0,)), k((1, 0), m=(1.0,)), k((50, 0), m=(0.3,))]
    assert render_point(ks, "smoe", (40, 0), subset=[0, 1])[0] == pytest.approx(1.0)


def test_render_point_empty_subset():
    with pytest.raises(EmptySubset):
        render_point([k((0, 0))], "rbf", (0, 0), subset=[])


@pytest.mark.parametrize("s", [0.01, 0.25, 1.0, 7.0])
def test_symmetric_pair_midpoint_under_bandwidth_scaling(s):
    r = math.sqrt(s)
    pair = [k((-5, 0), (r, 0, r), m=(0.1,)), k((5, 0), (r, 0, r), m=(0.9,))]
    assert abs(render_point(pair, "smoe", (0, 0))[0] - 0.5) <= 1e-9


def test_smoe_convex_hull(rng):
    for _ in range(100):
        ks = random_kernels(rng, int(rng.integers(2, 30)), channels=3, width=20, height=20,
                            scale=(0.2, 6), log_pi_sd=0.5)
        ks.m[:] = rng.uniform(-0.5, 1.5, ks.m.shape)
        y = render_point(ks, Head.SMOE, rng.uniform(-3, 23, 2))
        assert np.all(y >= ks.m.min(axis=0) - 1e-12) and np.all(y <= ks.m.max(axis=0) + 1e-12)


def test_render_image_single_kernel_constant():
    ks = KernelSet.isotropic([[1.3, 2.2]], [[0.8, 0.2, 0.4]])
    img = render_image(ks, "smoe", TileGrid(4, 4))
    assert img.shape == (4, 4, 3)
    np.testing.assert_allclose(img, np.broadcast_to([0.8, 0.2, 0.4], (4, 4, 3)), atol=1e-7)


def test_render_image_empty():
    ks = KernelSet(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 1)))
    with pytest.raises(EmptySubset):
        render_image(ks, "rbf", TileGrid(4, 4))


@pytest.mark.parametrize("head", ["smoe", "rbf"])
def test_render_image_matches_pointwise(rng, head):
    ks = random_kernels(rng, 6, channels=3, width=12, height=9, log_pi_sd=0.5)
    img = render_image(ks, head, TileGrid(12, 9), dtype=np.float64)
    for r in range(9):
        for c in range(12):
            np.testing.assert_allclose(img[r, c], render_point(ks, head, (c, r)), atol=1e-12)


@pytest.mark.parametrize("head", ["smoe", "rbf"])
def test_infinite_radius_index_equals_global(rng, head):
    ks = random_kernels(rng, 40, width=48, height=40, scale=(0.5, 4))
    grid = TileGrid(48, 40, 16)
    ref = render_image(ks, head, grid)
    tiled = render_image(ks, head, grid, build_tile_index(ks, grid, radius=math.inf))
    assert np.max(np.abs(ref - tiled)) <= 1e-5


@pytest.mark.parametrize("head", ["smoe", "rbf"])
def test_tiled_render_matches_truncated_pointwise(rng, head):
    from rsmoe.geometry import R99, mahalanobis2
    ks = random_kernels(rng, 30, width=40, height=40, scale=(0.5, 3))
    grid = TileGrid(40, 40, 16, (5, 2))
    idx = build_tile_index(ks, grid)
    img = render_image(ks, head, grid, idx, dtype=np.float64)
    for r in range(0, 40, 3):
        for c in range(0, 40, 3):
            listed = idx.kernels_of_block(grid.block_of_pixel(r, c)).tolist()
            keep = [j for j in listed if mahalanobis2(ks[j], (c, r)) <= R99 ** 2] or listed
            np.testing.assert_allclose(img[r, c], render_point(ks, head, (c, r), subset=keep), atol=1e-12)


def test_render_dtype():
    ks = KernelSet.isotropic([[1, 1]], [[0.5]])
    assert render_image(ks, "smoe", TileGrid(3, 3)).dtype == np.float32
