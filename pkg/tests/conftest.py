import sys

import numpy as np
import pytest

from lbhomog.fem import CoefficientSet
from lbhomog.geometry import InclusionShape, StripeLaminate
from lbhomog.meshing import build_cell_mesh, build_laminate_mesh, tile_domain_mesh


@pytest.fixture(scope="session")
def circle():
    return InclusionShape()


@pytest.fixture(scope="session")
def cell_coarse(circle):
    return build_cell_mesh(circle, 0.1)


@pytest.fixture(scope="session")
def cell_medium(circle):
    return build_cell_mesh(circle, 0.05)


@pytest.fixture(scope="session")
def laminate_cell():
    return build_laminate_mesh(StripeLaminate(0.5), 0.05)


@pytest.fixture(scope="session")
def domain2(cell_coarse):
    return tile_domain_mesh(cell_coarse, 2)


@pytest.fixture(scope="session")
def coeffs():
    return CoefficientSet()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
