import numpy as np
import pytest

from ddopf.grid import Grid, LineParams


def make_five_bus_grid(g: float = 2.0, b: float = -20.0) -> Grid:
    """5-bus radial grid with the default line parameters used throughout."""
    edges = [(1, 2), (2, 4), (2, 5), (3, 5)]
    lines = {e: LineParams(g=g, b=b) for e in edges}
    return Grid(nodes=[1, 2, 3, 4, 5], edges=edges, lines=lines)


@pytest.fixture
def five_bus_grid() -> Grid:
    return make_five_bus_grid()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
