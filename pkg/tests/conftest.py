import sys

import numpy as np
import pytest

from pcmorph import geom, shapes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mesh_files(tmp_path):
    """A small UV sphere and a cube written as OFF files."""
    sphere = tmp_path / "sphere.off"
    cube = tmp_path / "cube.off"
    sphere.write_bytes(geom.write_off(shapes.uv_sphere(6, 10)))
    cube.write_bytes(geom.write_off(shapes.cube_mesh()))
    return sphere, cube


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
