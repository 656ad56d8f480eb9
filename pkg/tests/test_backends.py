import math
import os
import subprocess
import sys

import numpy as np
import pytest

from rsmoe._raster import raster_pass
from rsmoe.core import TileGrid
from rsmoe.geometry import build_tile_index, global_index

from conftest import random_kernels


def instance(seed, radius=None, origin=(0, 0)):
    rng = np.random.default_rng(seed)
    ks = random_kernels(rng, 40, channels=3, width=50, height=37, scale=(0.5, 6), shear=2, log_pi_sd=0.5)
    ks.m[:] = rng.uniform(-0.2, 1.2, ks.m.shape)
    grid = TileGrid(50, 37, 16, origin)
    idx = build_tile_index(ks, grid) if radius is None else build_tile_index(ks, grid, radius=radius)
    return ks, idx, rng.uniform(0, 1, (37, 50, 3))


@pytest.mark.parametrize("smoe", [True, False])
@pytest.mark.parametrize("seed, radius, origin", [(0, None, (0, 0)), (1, None, (4, 12)), (2, math.inf, (0, 0))])
def test_numba_matches_numpy(smoe, seed, radius, origin):
    ks, idx, t = instance(seed, radius, origin)
    a = raster_pass(ks, smoe, idx, t, True, backend="numba")
    b = raster_pass(ks, smoe, idx, t, True, backend="numpy")
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(a[2], b[2], rtol=1e-9, atol=1e-14)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_repeatable_bitwise(backend):
    ks, idx, t = instance(3)
    a = raster_pass(ks, True, idx, t, True, backend=backend)
    b = raster_pass(ks, True, idx, t, True, backend=backend)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_render_only(backend):
    ks, idx, _ = instance(4)
    img, sse, g = raster_pass(ks, True, idx, backend=backend)
    assert img.shape == (37, 50, 3) and g is None and not sse.any()
    with pytest.raises(ValueError):
        raster_pass(ks, True, idx, want_grad=True, backend=backend)
    with pytest.raises(ValueError):
        raster_pass(ks, True, idx, np.zeros((5, 5, 3)), backend=backend)


def test_global_index_backends_agree():
    ks, _, t = instance(5)
    idx = global_index(ks, 50, 37)
    a = raster_pass(ks, True, idx, t, True, backend="numba")
    b = raster_pass(ks, True, idx, t, True, backend="numpy")
    np.testing.assert_allclose(a[2], b[2], rtol=1e-9, atol=1e-14)


@pytest.mark.parametrize("value, expected", [("numpy", "numpy"), ("NUMBA", "numba")])
def test_env_flag_selects_backend(value, expected):
    env = dict(os.environ, RSMOE_BACKEND=value)
    out = subprocess.run([sys.executable, "-c", "from rsmoe._backend import backend_name; print(backend_name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_env_flag_rejects_unknown():
    env = dict(os.environ, RSMOE_BACKEND="cuda")
    out = subprocess.run([sys.executable, "-c", "import rsmoe"], env=env, capture_output=True, text=True)
    assert out.returncode != 0 and "RSMOE_BACKEND" in out.stderr
