from pathlib import Path

import numpy as np
import pytest

from rsmoe.core import KernelSet

DATA = Path(__file__).parent / "data"


def random_kernels(rng, n, channels=3, width=16, height=16, scale=(1.5, 5.0), shear=1.0,
                   log_pi_sd=0.0):
    """Random well-conditioned kernel set over a ``width x height`` image."""
    mu = np.stack([rng.uniform(-1, width, n), rng.uniform(-1, height, n)], axis=1)
    chol = np.stack([rng.uniform(*scale, n), rng.uniform(-shear, shear, n),
                     rng.uniform(*scale, n)], axis=1)
    log_pi = rng.normal(0, log_pi_sd, n) if log_pi_sd else np.zeros(n)
    m = rng.uniform(0, 1, (n, channels))
    return KernelSet(mu, chol, log_pi, m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def astro256():
    from rsmoe.io import load_png
    return load_png(DATA / "astronaut_256.png")


@pytest.fixture(scope="session")
def astro64():
    from rsmoe.io import load_png
    return load_png(DATA / "astronaut_64.png")


# one line per acceptance criterion, echoed live and again in the summary
CRITERIA = []


@pytest.fixture
def criterion(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, ok, detail):
        line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        CRITERIA.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
