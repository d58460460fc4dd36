import numpy as np
import pytest

from hemoatlas.mesh import VESSEL, TetMesh, VesselSpec, extract_boundary, generate_synthetic_vessel

REF_TET = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


@pytest.fixture
def ref_tet_mesh():
    return TetMesh.from_arrays(REF_TET, [[0, 1, 2, 3]], [VESSEL])


@pytest.fixture
def two_tet_mesh():
    """Two vessel tets sharing the face (1, 2, 3)."""
    nodes = np.vstack([REF_TET, [[1.0, 1.0, 1.0]]])
    return TetMesh.from_arrays(nodes, [[0, 1, 2, 3], [4, 1, 3, 2]], [VESSEL, VESSEL])


@pytest.fixture
def four_tet_mesh():
    """Four tets around an interior node, two compartments."""
    nodes = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0.3, 0.3, 0.3]])
    tets = [[0, 1, 2, 4], [0, 1, 3, 4], [0, 2, 3, 4], [1, 2, 3, 4]]
    return TetMesh.from_arrays(nodes, tets, ["Grey matter", "White matter", "Grey matter", "White matter"])


@pytest.fixture(scope="session")
def small_cylinder():
    """Straight vessel, radius 1 mm, h = 0.5 mm, in a grey-matter box."""
    spec = VesselSpec(radius=1e-3, length=4e-3, box=(5e-3, 5e-3, 8e-3), h=0.5e-3)
    mesh = generate_synthetic_vessel(spec)
    return spec, mesh, extract_boundary(mesh)


@pytest.fixture(scope="session")
def small_y():
    spec = VesselSpec(radius=1e-3, length=6e-3, box=(8e-3, 6e-3, 10e-3), h=0.5e-3, kind="y")
    mesh = generate_synthetic_vessel(spec)
    return spec, mesh, extract_boundary(mesh)


def rng(seed=0):
    return np.random.default_rng(seed)
