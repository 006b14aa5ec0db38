"""Shared fixtures: small canonical meshes and a tolerant FD helper."""

import numpy as np
import pytest

from clothcap.geometry import Mesh, loop_subdivide


def make_tetrahedron():
    v = np.array([[1.0, 1.0, 1.0],
                  [1.0, -1.0, -1.0],
                  [-1.0, 1.0, -1.0],
                  [-1.0, -1.0, 1.0]]) / np.sqrt(3.0)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int32)
    return Mesh(v, f)


def make_icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
                 dtype=np.float64)
    v /= np.linalg.norm(v, axis=1)[:, None]
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
                 dtype=np.int32)
    return Mesh(v, f)


def make_icosphere(levels=2):
    """Unit sphere by subdividing an icosahedron and renormalizing."""
    mesh = make_icosahedron()
    for _ in range(levels):
        mesh = loop_subdivide(mesh)
        v = mesh.vertices
        mesh = Mesh(v / np.linalg.norm(v, axis=1)[:, None], mesh.faces)
    return mesh


@pytest.fixture
def tetrahedron():
    return make_tetrahedron()


@pytest.fixture
def icosphere():
    return make_icosphere(2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
