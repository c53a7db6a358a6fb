import numpy as np
import pytest

from cemms import media
from cemms.mesh import build_grids

MIXED_TOP = {"top": "D", "bottom": "N", "left": "N", "right": "N"}


@pytest.fixture(scope="session")
def geom44():
    return build_grids(4, 4, "dirichlet")


@pytest.fixture(scope="session")
def geom44_mixed():
    return build_grids(4, 4, MIXED_TOP)


@pytest.fixture(scope="session")
def geom44_robin():
    return build_grids(4, 4, "neumann")


@pytest.fixture(scope="session")
def uniform44(geom44):
    return media.uniform_field(geom44, 1.0)


@pytest.fixture(scope="session")
def channels44(geom44):
    return media.synth_channels(geom44, "channels", 0.2, 5, kappa_I=1e4)


def model1_gtilde(geom):
    x, y = geom.nodes[:, 0], geom.nodes[:, 1]
    return x ** 2 + np.exp(x * y)


def cell_centers(geom):
    cell = np.arange(geom.n_cells)
    x = (cell % geom.n_fine + 0.5) * geom.h
    y = (cell // geom.n_fine + 0.5) * geom.h
    return x, y
