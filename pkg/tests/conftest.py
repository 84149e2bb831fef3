import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from wildscalar.config import ConstructionParams, GridSpec  # noqa: E402
from wildscalar.geometry import build_screens  # noqa: E402
from wildscalar.integrator import make_patches  # noqa: E402
from wildscalar.symbols import builtin  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full pipeline runs")


@pytest.fixture(scope="session")
def grid():
    return GridSpec(n=2, N_x=32, N_t=32, T=64.0)


@pytest.fixture(scope="session")
def small_params(grid):
    """Coarse but admissible: (1-0.18)^3 > 1/2 and (1-0.18)^4 < 1/2."""
    return ConstructionParams(grid=grid, stages=1, eta=0.18, steps=8, max_balls=2, workers=1)


@pytest.fixture(scope="session")
def pm2d():
    return builtin("pm2d")


@pytest.fixture(scope="session")
def pm2d_patches(pm2d):
    return make_patches(pm2d, ConstructionParams())


@pytest.fixture(scope="session")
def pm2d_screens(pm2d, pm2d_patches):
    return build_screens(pm2d, pm2d_patches)
