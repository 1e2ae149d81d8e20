import numpy as np
import pytest

from sst.episodes import make_fold
from sst.model import ModelSpec


def fd_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def toy_episode_arrays(rng, size=8, channels=3):
    """Random image and a non-empty random binary mask of side ``size``."""
    img = rng.uniform(0, 1, size=(channels, size, size)).astype(np.float32)
    mask = (rng.random((1, size, size)) < 0.4).astype(np.float32)
    # foreground must survive nearest downsampling to size/4 (samples at offset 2, stride 4)
    mask[0, 2, 2] = 1.0
    return img, mask


@pytest.fixture(scope="session")
def spec():
    return ModelSpec()


@pytest.fixture(scope="session")
def fold0():
    return make_fold(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
