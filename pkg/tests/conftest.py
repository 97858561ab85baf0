import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'src'))

from grid_world import OccupancyGrid  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance experiment')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def open_grid():
    return OccupancyGrid.open(16, 16)


@pytest.fixture
def two_room_grid():
    """24x24 map split by a wall at x=12 with a two-cell doorway."""
    grid = OccupancyGrid.open(24, 24)
    grid.obstacle[12, :] = True
    grid.obstacle[12, 11:13] = False
    return grid


@pytest.fixture
def config_dir():
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'config')


def random_grid(rng, width, height, density=0.25):
    grid = OccupancyGrid.open(width, height)
    grid.obstacle |= rng.random((width, height)) < density
    return grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
