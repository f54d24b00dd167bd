import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from kolmogorov.fields import GridSpec
from kolmogorov.geometry import BoxDomain


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: refinement studies and large Monte-Carlo runs')


@pytest.fixture
def unit_box():
    return BoxDomain((0.0,), (1.0,), (0.0,), (1.0,), 0.0, 1.0)


@pytest.fixture
def sym_box():
    return BoxDomain((-1.0,), (1.0,), (-1.0,), (1.0,), 0.0, 1.0)


@pytest.fixture
def unit_grid(unit_box):
    return GridSpec(unit_box, (33,), (17,), 9)


@pytest.fixture
def sym_grid(sym_box):
    return GridSpec(sym_box, (11,), (9,), 6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
