import numpy as np
import pytest

from mfeit import fem


@pytest.fixture(scope="session")
def geometry():
    return fem.SensorGeometry()


@pytest.fixture(scope="session")
def protocol():
    return fem.adjacent_protocol(16)


@pytest.fixture(scope="session")
def mesh_l1(geometry):
    return fem.build_disc_mesh(geometry, 1)


@pytest.fixture(scope="session")
def mesh_l2(geometry):
    return fem.build_disc_mesh(geometry, 2)


@pytest.fixture(scope="session")
def grid32():
    return fem.build_pixel_grid(32, 32)


@pytest.fixture(scope="session")
def smat32(mesh_l2, protocol, grid32):
    return fem.sensitivity_matrix(mesh_l2, 2.0, protocol, grid32)


@pytest.fixture(scope="session")
def homogeneous_frame_l2(mesh_l2, protocol):
    sigma = np.full(mesh_l2.n_elements, 2.0)
    return fem.forward_frame(mesh_l2, sigma, protocol)
