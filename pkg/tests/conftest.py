import numpy as np
import pytest

from topo3d.fem import BoundarySetup, MaterialModel, build_element_stiffness
from topo3d.mesh import build_mesh
from topo3d.problem import default_cantilever

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ke():
    return build_element_stiffness(0.3)


@pytest.fixture
def mat():
    return MaterialModel()


def cantilever(dims):
    return build_mesh(*dims), default_cantilever(dims)


def bottom_fixed_single(load_dof: int, value: float = 1.0):
    """1x1x1 mesh with the z=0 face clamped and one point load."""
    mesh = build_mesh(1, 1, 1)
    nodes = [mesh.node_id(ix, iy, 0) for ix in (0, 1) for iy in (0, 1)]
    fixed = [3 * n + k for n in nodes for k in range(3)]
    return mesh, BoundarySetup.create(mesh.n_dofs, fixed, {load_dof: value})


def random_rho(n, seed=0, lo=0.0):
    return np.random.default_rng(seed).uniform(lo, 1.0, n)
