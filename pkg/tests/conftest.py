import os

import numpy as np
import pytest

from rose.models.network import NetworkConfig
from rose.utils.image_io import write_pgm

SMALL_WIDTHS = (2, 2, 3, 3, 3, 3, 4, 4, 4, 4)


def pytest_collection_modifyitems(config, items):
    if os.getenv('ROSE_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='set ROSE_RUN_SLOW=1 to run long acceptance checks')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded generator for reproducible random inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Full ten-layer topology with a handful of filters per layer."""
    return NetworkConfig(feature_widths=SMALL_WIDTHS)


@pytest.fixture
def write_gray(tmp_path):
    """Write a uint8 array as a PGM under tmp_path and return its path."""
    def _write(name, pixels):
        return write_pgm(tmp_path / name, pixels.astype(np.uint8))
    return _write
