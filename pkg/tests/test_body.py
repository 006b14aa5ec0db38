import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from clothcap.body import (BodyParams, ParametricBody, rodrigues,
                           rodrigues_jacobian, canonicalize_axis_angle,
                           rest_shape, joint_positions, pose_body, PosedBody,
                           make_mini_body, save_body, load_body)
from clothcap.errors import InvalidInputError, ManifestError


@pytest.fixture(scope="module")
def mini():
    return make_mini_body(seed=0, n_vertices=600)


# ---------------------------------------------------------------------------
# Rotations

def test_rodrigues_identity():
    assert_allclose(rodrigues(np.zeros(3)), np.eye(3), atol=1e-15)


def test_rodrigues_quarter_turn():
    R = rodrigues(np.array([0.0, 0.0, np.pi / 2]))
    assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)


def test_rodrigues_jacobian_matches_fd(rng):
    aa = 0.7 * rng.standard_normal(3)
    J = rodrigues_jacobian(aa)
    eps = 1e-6
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        fd = (rodrigues(aa + d) - rodrigues(aa - d)) / (2 * eps)
        assert_allclose(J[..., k], fd, atol=1e-6)


def test_canonicalize_wraps_large_angles():
    theta = np.array([0.0, 0.0, 2 * np.pi + 0.3])
    out = canonicalize_axis_angle(theta)
    assert np.linalg.norm(out) < 2 * np.pi
    assert_allclose(rodrigues(out), rodrigues(theta), atol=1e-9)


# ---------------------------------------------------------------------------
# Rest shape and joints

def test_rest_shape_at_origin_is_template(mini):
    params = BodyParams.rest(mini.n_shape, mini.n_joints)
    out = rest_shape(mini, params)
    assert np.array_equal(out, mini.template_vertices)


def test_rest_shape_linear_in_beta(mini):
    beta = np.zeros(mini.n_shape)
    beta[0] = 1.0
    params = BodyParams(beta, np.zeros(3 * mini.n_joints), np.zeros(3))
    out = rest_shape(mini, params)
    want = mini.template_vertices + mini.shape_basis[:, 0].reshape(-1, 3)
    assert_allclose(out, want, atol=1e-12)


def test_rest_shape_matches_dense_oracle(mini, rng):
    beta = rng.standard_normal(mini.n_shape)
    theta = 0.2 * rng.standard_normal(3 * mini.n_joints)
    params = BodyParams(beta, theta, np.zeros(3))
    got = rest_shape(mini, params)

    # independent dense evaluation of template + B^S beta + B^P f(theta)
    feats = []
    for j in range(mini.n_joints):
        if j == mini.root:
            continue
        feats.append((rodrigues(theta[3 * j:3 * j + 3]) - np.eye(3)).ravel())
    feat = np.concatenate(feats)
    flat = (mini.template_vertices.ravel() + mini.shape_basis @ beta
            + mini.pose_basis @ feat)
    assert_allclose(got, flat.reshape(-1, 3), atol=1e-9)


def test_joints_linear_in_beta(mini, rng):
    b1 = rng.standard_normal(mini.n_shape)
    b2 = rng.standard_normal(mini.n_shape)
    j0 = joint_positions(mini, np.zeros(mini.n_shape))
    lhs = joint_positions(mini, b1 + b2) - j0
    rhs = (joint_positions(mini, b1) - j0) + (joint_positions(mini, b2) - j0)
    assert_allclose(lhs, rhs, atol=1e-9)


def test_joints_indicator_row_selects_vertex(mini):
    reg = np.zeros_like(mini.joint_regressor)
    reg[:, 7] = 1.0
    body = ParametricBody(mini.template_vertices, mini.faces, mini.shape_basis,
                          mini.pose_basis, reg, mini.weights, mini.parents,
                          mini.uv_coords, mini.uv_faces)
    j = joint_positions(body, np.zeros(body.n_shape))
    assert_allclose(j, np.repeat(mini.template_vertices[7][None],
                                 mini.n_joints, axis=0), atol=1e-12)


# ---------------------------------------------------------------------------
# Posing

def test_pose_identity_equals_rest_shape(mini):
    params = BodyParams.rest(mini.n_shape, mini.n_joints)
    mesh = pose_body(mini, params)
    assert np.array_equal(mesh.vertices, rest_shape(mini, params))


def test_pose_root_rotation_is_rigid(mini):
    theta = np.zeros(3 * mini.n_joints)
    theta[3 * mini.root:3 * mini.root + 3] = [0.0, 0.0, np.pi / 3]
    params = BodyParams(np.zeros(mini.n_shape), theta, np.zeros(3))
    posed = pose_body(mini, params).vertices
    R = rodrigues(np.array([0.0, 0.0, np.pi / 3]))
    pivot = joint_positions(mini, params.beta)[mini.root]
    want = (mini.template_vertices - pivot) @ R.T + pivot
    assert_allclose(posed, want, atol=1e-9)


def test_pose_two_bone_chain_manual_fk():
    # explicit 2-joint body: one bone along +x, elbow bends 90 degrees about z
    template = np.array([[0.5, 0.0, 0.0], [1.5, 0.0, 0.0], [2.0, 0.0, 0.0]])
    n_v = 3
    reg = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])  # joints at v0, v1
    weights = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    body = ParametricBody(template, np.array([[0, 1, 2]], dtype=np.int32),
                          np.zeros((3 * n_v, 1)), np.zeros((3 * n_v, 9)),
                          reg, weights, np.array([-1, 0]))
    theta = np.zeros(6)
    theta[3:] = [0.0, 0.0, np.pi / 2]
    posed = pose_body(body, BodyParams(np.zeros(1), theta, np.zeros(3))).vertices
    # vertex 2 sits 0.5 beyond the elbow at (1.5,0,0); rotated to +y
    assert_allclose(posed[2], [1.5, 0.5, 0.0], atol=1e-12)
    assert_allclose(posed[1], [1.5, 0.0, 0.0], atol=1e-12)
    assert_allclose(posed[0], [0.5, 0.0, 0.0], atol=1e-12)


def test_pose_global_rigid_equivariance(mini, rng):
    theta = 0.2 * rng.standard_normal(3 * mini.n_joints)
    params = BodyParams(np.zeros(mini.n_shape), theta, np.array([0.1, 0.2, 0.3]))
    base = pose_body(mini, params).vertices

    g_aa = np.array([0.3, -0.2, 0.5])
    G = rodrigues(g_aa)
    theta_g = theta.copy()
    root = mini.root
    Rroot = rodrigues(theta[3 * root:3 * root + 3])
    from scipy.spatial.transform import Rotation
    theta_g[3 * root:3 * root + 3] = Rotation.from_matrix(G @ Rroot).as_rotvec()
    pivot = joint_positions(mini, params.beta)[root]
    # keep the pivot fixed under G, then translate by G's action on t
    t_g = G @ (params.translation + pivot) - pivot
    moved = pose_body(mini, BodyParams(params.beta, theta_g, t_g)).vertices
    want = (base - params.translation - pivot) @ G.T + pivot + t_g
    assert_allclose(moved, want, atol=1e-9)


def test_posed_body_rejects_bad_lengths(mini):
    with pytest.raises(InvalidInputError):
        PosedBody(mini, BodyParams(np.zeros(mini.n_shape + 1),
                                   np.zeros(3 * mini.n_joints), np.zeros(3)))
    with pytest.raises(InvalidInputError):
        PosedBody(mini, BodyParams(np.zeros(mini.n_shape),
                                   np.zeros(3 * mini.n_joints + 3), np.zeros(3)))


# ---------------------------------------------------------------------------
# Mini body generator

def test_mini_body_deterministic():
    a = make_mini_body(seed=3, n_vertices=400)
    b = make_mini_body(seed=3, n_vertices=400)
    for name in ("template_vertices", "faces", "shape_basis", "pose_basis",
                 "joint_regressor", "weights", "uv_coords"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_mini_body_invariants(mini):
    assert np.abs(mini.weights.sum(axis=1) - 1.0).max() < 1e-6
    assert mini.weights.min() >= 0.0
    assert np.abs(mini.joint_regressor.sum(axis=1) - 1.0).max() < 1e-6
    # parents encode a tree with one root
    assert int(np.sum(mini.parents < 0)) == 1
    gram = mini.shape_basis.T @ mini.shape_basis
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-6


def test_mini_body_mesh_is_closed(mini):
    counts = {}
    for f in mini.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    assert set(counts.values()) == {2}


def test_mini_body_rejects_tiny_counts():
    with pytest.raises(InvalidInputError):
        make_mini_body(seed=0, n_vertices=50)
    with pytest.raises(InvalidInputError):
        make_mini_body(seed=0, n_vertices=400, n_joints=3)


# ---------------------------------------------------------------------------
# Container round trip

def test_body_save_load_round_trip(tmp_path, mini):
    save_body(tmp_path / "b", mini)
    back = load_body(tmp_path / "b")
    assert np.array_equal(back.template_vertices, mini.template_vertices)
    assert np.array_equal(back.faces, mini.faces)
    assert np.array_equal(back.shape_basis, mini.shape_basis)
    assert np.array_equal(back.weights, mini.weights)
    assert np.array_equal(back.parents, mini.parents)


def test_body_load_truncated_payload(tmp_path, mini):
    save_body(tmp_path / "b", mini)
    blob = tmp_path / "b" / "template.f32"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ManifestError):
        load_body(tmp_path / "b")


def test_body_load_cyclic_hierarchy(tmp_path, mini):
    save_body(tmp_path / "b", mini)
    mpath = tmp_path / "b" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    parents = manifest["parents"]
    parents[0] = 1  # root points at its own child: cycle
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(ManifestError):
        load_body(tmp_path / "b")
