"""
Shared fixtures for the solver test suite
"""

import numpy as np
import pytest

from app.forward_solver import AcquisitionSetup, PointSource
from app.medium import constant_model
from app.mesh import SimplicialMesh, build_structured_mesh
from app.monitoring import monitor


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end scenarios taking more than a few seconds")


@pytest.fixture(autouse=True)
def reset_monitor():
    monitor.reset()
    yield
    monitor.reset()


@pytest.fixture
def two_triangles() -> SimplicialMesh:
    """Unit square split along its diagonal"""
    vertices = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    return SimplicialMesh.from_arrays(vertices, [[0, 1, 2], [0, 2, 3]])


@pytest.fixture
def square_mesh() -> SimplicialMesh:
    return build_structured_mesh([(0.0, 1.0), (0.0, 1.0)], [4, 4])


@pytest.fixture
def unit_model(square_mesh):
    return constant_model(square_mesh, 1.0, 1.0)


@pytest.fixture
def small_setup() -> AcquisitionSetup:
    """Two sources and two receivers inside the unit square"""
    sources = (PointSource((0.3, 0.7)), PointSource((0.7, 0.65), 0.5 - 0.25j))
    receivers = np.array([[0.2, 0.85], [0.8, 0.85]])
    return AcquisitionSetup(sources=sources, receivers=receivers)
