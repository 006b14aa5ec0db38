import numpy as np
import pytest
from numpy.testing import assert_allclose

from clothcap.body import rodrigues
from clothcap.errors import InvalidInputError, TopologyError
from clothcap.geometry import (Mesh, skin_lbs, loop_subdivide, uniform_laplacian,
                               vertex_normals, point_to_surface,
                               point_to_surface_brute, point_to_surface_bvh,
                               unique_edges, write_obj, read_obj)
from conftest import make_icosphere


# ---------------------------------------------------------------------------
# Mesh container

def test_mesh_rejects_out_of_range_face():
    with pytest.raises(InvalidInputError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


def test_mesh_rejects_degenerate_face():
    with pytest.raises(InvalidInputError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


def test_mesh_uv_faces_must_match_faces(tetrahedron):
    with pytest.raises(InvalidInputError):
        Mesh(tetrahedron.vertices, tetrahedron.faces,
             uv_coords=np.zeros((4, 2)), uv_faces=tetrahedron.faces[:2])


# ---------------------------------------------------------------------------
# Linear blend skinning

def test_skin_identity_pose_is_identity(rng):
    verts = rng.standard_normal((20, 3))
    joints = rng.standard_normal((3, 3))
    rot = np.repeat(np.eye(3)[None], 3, axis=0)
    w = rng.random((20, 3))
    w /= w.sum(axis=1, keepdims=True)
    out = skin_lbs(verts, joints, rot, np.zeros((3, 3)), w)
    assert np.array_equal(out, verts)


def test_skin_single_joint_rotation():
    # 90 degrees about z at the origin pivot sends (1,0,0) to (0,1,0)
    rot = rodrigues(np.array([0.0, 0.0, np.pi / 2]))[None]
    out = skin_lbs(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 3)), rot,
                   np.zeros((1, 3)), np.ones((1, 1)))
    assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)


def test_skin_blend_of_identity_and_translation(rng):
    v = rng.standard_normal((5, 3))
    rot = np.repeat(np.eye(3)[None], 2, axis=0)
    trans = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    w = np.full((5, 2), 0.5)
    out = skin_lbs(v, np.zeros((2, 3)), rot, trans, w)
    assert_allclose(out, v + [0.0, 0.0, 1.0], atol=1e-12)


def test_skin_global_rigid_equivariance(rng):
    verts = rng.standard_normal((30, 3))
    joints = rng.standard_normal((4, 3))
    rots = np.stack([rodrigues(0.3 * rng.standard_normal(3)) for _ in range(4)])
    trans = 0.1 * rng.standard_normal((4, 3))
    w = rng.random((30, 4))
    w /= w.sum(axis=1, keepdims=True)
    base = skin_lbs(verts, joints, rots, trans, w)

    G = rodrigues(np.array([0.2, -0.4, 0.7]))
    tG = np.array([0.3, -1.0, 2.0])
    # compose G with each joint map: x -> G(R(x - j) + j + t) + tG
    rots_g = np.einsum("ab,jbc->jac", G, rots)
    trans_g = (np.einsum("ab,jb->ja", G, joints + trans) + tG) - joints
    moved = skin_lbs(verts, joints, rots_g, trans_g, w)
    assert_allclose(moved, base @ G.T + tG, atol=1e-9)


def test_skin_rejects_bad_rotation(rng):
    verts = rng.standard_normal((4, 3))
    bad = np.eye(3)[None] * 1.5
    with pytest.raises(InvalidInputError):
        skin_lbs(verts, np.zeros((1, 3)), bad, np.zeros((1, 3)), np.ones((4, 1)))


def test_skin_rejects_dimension_mismatch(rng):
    verts = rng.standard_normal((4, 3))
    with pytest.raises(InvalidInputError):
        skin_lbs(verts, np.zeros((2, 3)), np.repeat(np.eye(3)[None], 2, 0),
                 np.zeros((2, 3)), np.ones((4, 3)))


# ---------------------------------------------------------------------------
# Loop subdivision

def test_subdivide_tetrahedron_counts(tetrahedron):
    out = loop_subdivide(tetrahedron)
    assert out.n_vertices == 10  # V + E = 4 + 6
    assert out.n_faces == 16


def test_subdivide_planar_patch_stays_planar(rng):
    pts2d = rng.random((12, 2))
    verts = np.column_stack([pts2d, np.full(12, 0.7)])
    from scipy.spatial import Delaunay
    faces = Delaunay(pts2d).simplices.astype(np.int32)
    out = loop_subdivide(Mesh(verts, faces))
    assert_allclose(out.vertices[:, 2], 0.7, atol=1e-12)


def test_subdivide_preserves_closedness_and_euler(icosphere):
    out = loop_subdivide(icosphere)
    edges = unique_edges(out.faces)
    # closed: every edge shared by exactly two faces
    counts = {}
    for f in out.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            counts[(min(a, b), max(a, b))] = counts.get((min(a, b), max(a, b)), 0) + 1
    assert set(counts.values()) == {2}
    chi = out.n_vertices - len(edges) + out.n_faces
    chi_in = icosphere.n_vertices - len(unique_edges(icosphere.faces)) + icosphere.n_faces
    assert chi == chi_in == 2


def test_subdivide_rejects_nonmanifold_edge():
    # three faces sharing edge (0,1)
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0]], dtype=float)
    f = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]], dtype=np.int32)
    with pytest.raises(TopologyError):
        loop_subdivide(Mesh(v, f))


def test_subdivide_uvs_follow_faces(icosphere):
    uv = np.abs(icosphere.vertices[:, :2])
    uv = uv / max(uv.max(), 1.0)
    mesh = Mesh(icosphere.vertices, icosphere.faces, uv, icosphere.faces.copy())
    out = loop_subdivide(mesh)
    assert out.uv_faces.shape == out.faces.shape
    assert np.all(out.uv_coords >= -1e-9)


# ---------------------------------------------------------------------------
# Laplacian

def test_laplacian_rows_sum_to_zero(icosphere):
    L = uniform_laplacian(icosphere)
    assert np.abs(L.sum(axis=1)).max() < 1e-9
    const = L @ np.ones((icosphere.n_vertices, 3))
    assert_allclose(const, 0.0, atol=1e-12)


def test_laplacian_hexagonal_fan_center():
    ang = np.linspace(0, 2 * np.pi, 7)[:-1]
    ring = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(6)])
    verts = np.vstack([[0.0, 0.0, 0.0], ring])
    faces = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)], dtype=np.int32)
    L = uniform_laplacian(Mesh(verts, faces))
    out = L @ verts
    assert_allclose(out[0], 0.0, atol=1e-12)


def test_laplacian_flat_grid_interior_zero():
    n = 6
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n * n)])
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            # alternate the diagonal so interior stencils stay symmetric
            if (i + j) % 2 == 0:
                faces += [[a, a + 1, a + n], [a + 1, a + n + 1, a + n]]
            else:
                faces += [[a, a + n + 1, a + n], [a, a + 1, a + n + 1]]
    L = uniform_laplacian(Mesh(verts, np.array(faces, dtype=np.int32)))
    out = L @ verts
    interior = [i * n + j for i in range(2, n - 2) for j in range(2, n - 2)]
    assert np.abs(out[interior]).max() < 1e-12


def test_laplacian_offdiagonal_only_on_edges(tetrahedron):
    L = uniform_laplacian(tetrahedron).toarray()
    edges = {tuple(sorted(e)) for e in unique_edges(tetrahedron.faces)}
    n = tetrahedron.n_vertices
    for i in range(n):
        for j in range(n):
            if i != j and abs(L[i, j]) > 0:
                assert tuple(sorted((i, j))) in edges


# ---------------------------------------------------------------------------
# Normals

def test_normals_flat_triangle():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    n = vertex_normals(v, np.array([[0, 1, 2]], dtype=np.int32))
    assert_allclose(n, [[0, 0, 1]] * 3, atol=1e-12)


def test_normals_icosphere_matches_radial(icosphere):
    n = vertex_normals(icosphere.vertices, icosphere.faces)
    radial = icosphere.vertices / np.linalg.norm(icosphere.vertices, axis=1)[:, None]
    ang = np.degrees(np.arccos(np.clip(np.sum(n * radial, axis=1), -1, 1)))
    assert ang.max() < 2.0


def test_normals_flip_with_orientation(icosphere):
    n = vertex_normals(icosphere.vertices, icosphere.faces)
    flipped = icosphere.faces[:, ::-1].copy()
    m = vertex_normals(icosphere.vertices, flipped)
    assert_allclose(m, -n, atol=1e-12)


def test_normals_degenerate_face_warns():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
    f = np.array([[0, 1, 2], [0, 1, 3]], dtype=np.int32)  # first face is a sliver
    with pytest.warns(UserWarning):
        n = vertex_normals(v, f)
    assert np.isfinite(n).all()


# ---------------------------------------------------------------------------
# Point-to-surface distance

def test_point_to_surface_zero_on_vertices(icosphere):
    assert point_to_surface(icosphere.vertices, icosphere) < 1e-12


def test_point_to_surface_perpendicular_height():
    big = Mesh(np.array([[-10.0, -10, 0], [10, -10, 0], [0, 10, 0]]),
               np.array([[0, 1, 2]], dtype=np.int32))
    assert_allclose(point_to_surface(np.array([[0.0, 0.0, 0.37]]), big), 0.37)


def test_point_to_surface_sphere_oracle(rng):
    fine = make_icosphere(3)
    pts = rng.standard_normal((1000, 3))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    pts *= rng.uniform(0.5, 1.5, 1000)[:, None]
    got = point_to_surface(pts, fine)
    want = np.abs(np.linalg.norm(pts, axis=1) - 1.0).mean()
    assert abs(got - want) < 0.01 * max(want, 1e-9) + 1e-4


def test_point_to_surface_brute_vs_bvh(rng, icosphere):
    pts = rng.standard_normal((200, 3))
    d_brute = point_to_surface_brute(pts, icosphere)
    d_bvh = point_to_surface_bvh(pts, icosphere)
    assert np.abs(d_brute - d_bvh).max() < 1e-9


def test_point_to_surface_rigid_motion_symmetry(rng, icosphere):
    pts = rng.standard_normal((50, 3))
    base = point_to_surface(pts, icosphere)
    G = rodrigues(np.array([0.4, 0.1, -0.3]))
    t = np.array([1.0, -2.0, 0.5])
    moved = point_to_surface(pts @ G.T + t,
                             icosphere.with_vertices(icosphere.vertices @ G.T + t))
    assert abs(base - moved) < 1e-9


def test_point_to_surface_empty_points(icosphere):
    with pytest.raises(InvalidInputError):
        point_to_surface(np.zeros((0, 3)), icosphere)


# ---------------------------------------------------------------------------
# OBJ round trip

def test_obj_round_trip(tmp_path, icosphere):
    uv = (icosphere.vertices[:, :2] + 1.0) / 2.0
    mesh = Mesh(icosphere.vertices, icosphere.faces, uv, icosphere.faces.copy())
    path = tmp_path / "m.obj"
    write_obj(path, mesh)
    back = read_obj(path)
    assert_allclose(back.vertices, mesh.vertices, atol=1e-8)
    assert np.array_equal(back.faces, mesh.faces)
    assert_allclose(back.uv_coords, mesh.uv_coords, atol=1e-8)


def test_obj_write_deterministic(tmp_path, icosphere):
    p1, p2 = tmp_path / "a.obj", tmp_path / "b.obj"
    write_obj(p1, icosphere)
    write_obj(p2, icosphere)
    assert p1.read_bytes() == p2.read_bytes()
