"""Skinned parametric body: shape/pose blendshapes, kinematic tree, LBS.

The body is a template mesh plus linear shape and pose correctives, a joint
regressor, skinning weights and a parent tree. Posing runs forward kinematics
over per-joint axis-angle rotations and blends the resulting rigid transforms
with :func:`clothcap.geometry.skin_lbs`. ``PosedBody`` keeps the forward
caches needed to pull energy gradients back to the parameters.

Coordinates follow the camera convention (y down): the bundled test body
stands head toward -y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import InvalidInputError
from .geometry import Mesh, skin_lbs, lbs_linear_maps

# ---------------------------------------------------------------------------
# Axis-angle rotations


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    a = np.asarray(axis_angle, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    theta = np.linalg.norm(a, axis=-1)
    small = theta < 1e-8
    t2 = theta**2
    # sin(t)/t and (1-cos(t))/t^2 with series fallbacks near zero
    f1 = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
    f2 = np.where(small, 0.5 - t2 / 24.0,
                  (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    K = _hat(a)
    K2 = K @ K
    R = np.eye(3) + f1[:, None, None] * K + f2[:, None, None] * K2
    return R[0] if single else R


def _hat(a: np.ndarray) -> np.ndarray:
    """Batched skew-symmetric matrices from (..., 3) vectors."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros(a.shape[:-1] + (3, 3))
    x, y, z = a[..., 0], a[..., 1], a[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


_E_HAT = _hat(np.eye(3))  # (3, 3, 3): basis skew matrices


def rodrigues_jacobian(axis_angle: np.ndarray) -> np.ndarray:
    """dR/da for axis-angle inputs: shape (..., 3, 3, 3), last axis = a index."""
    a = np.asarray(axis_angle, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    theta = np.linalg.norm(a, axis=-1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    t2 = theta**2
    f1 = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / safe)
    f2 = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    # d f1/dt, d f2/dt with series fallbacks
    df1 = np.where(small, -theta / 3.0, (theta * np.cos(theta) - np.sin(theta)) / np.where(small, 1.0, t2))
    df2 = np.where(small, -theta / 12.0,
                   (theta * np.sin(theta) - 2.0 * (1.0 - np.cos(theta))) / np.where(small, 1.0, safe**3))
    dt_da = a / safe[:, None]  # ~0 contribution when small since df* -> 0

    K = _hat(a)
    K2 = K @ K
    EK = np.einsum("kab,nbc->nkac", _E_HAT, K)
    KE = np.einsum("nab,kbc->nkac", K, _E_HAT)
    jac = (df1[:, None] * dt_da)[:, :, None, None] * K[:, None] \
        + f1[:, None, None, None] * _E_HAT[None] \
        + (df2[:, None] * dt_da)[:, :, None, None] * K2[:, None] \
        + f2[:, None, None, None] * (EK + KE)
    jac = np.moveaxis(jac, 1, 3)  # (..., 3, 3, 3) with a-index last
    return jac[0] if single else jac


def canonicalize_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Wrap per-joint rotation angles into [0, 2*pi)."""
    t = np.asarray(theta, dtype=np.float64).reshape(-1, 3).copy()
    ang = np.linalg.norm(t, axis=1)
    wrap = ang >= 2.0 * np.pi
    if wrap.any():
        new_ang = np.mod(ang[wrap], 2.0 * np.pi)
        t[wrap] *= (new_ang / ang[wrap])[:, None]
    return t.ravel()


# ---------------------------------------------------------------------------
# Parameter and model containers


@dataclass
class BodyParams:
    """Per-frame pose state: shape is shared across frames by construction."""

    beta: np.ndarray        # (n_shape,)
    theta: np.ndarray       # (3 * n_joints,) axis-angle per joint
    translation: np.ndarray  # (3,) global, applied after skinning

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self.translation = np.asarray(self.translation, dtype=np.float64).ravel()
        if self.translation.shape != (3,):
            raise InvalidInputError("translation must have 3 components")
        if len(self.theta) % 3 != 0:
            raise InvalidInputError("theta length must be a multiple of 3")

    @staticmethod
    def rest(n_shape: int, n_joints: int) -> "BodyParams":
        return BodyParams(np.zeros(n_shape), np.zeros(3 * n_joints), np.zeros(3))


@dataclass
class ParametricBody:
    """Template + linear correctives + kinematic tree + skinning weights."""

    template_vertices: np.ndarray  # (n, 3)
    faces: np.ndarray              # (m, 3)
    shape_basis: np.ndarray        # (3n, n_shape)
    pose_basis: np.ndarray         # (3n, 9 * (n_joints - 1)), may be all-zero
    joint_regressor: np.ndarray    # (n_joints, n), rows sum to 1
    weights: np.ndarray            # (n, n_joints), convex rows
    parents: np.ndarray            # (n_joints,), -1 marks the root
    uv_coords: np.ndarray | None = None
    uv_faces: np.ndarray | None = None
    shape_basis_orthonormal: bool = False

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int32)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64).ravel()
        n, j = self.n_vertices, self.n_joints
        if self.shape_basis.shape[0] != 3 * n:
            raise InvalidInputError("shape_basis must have 3 * n_vertices rows")
        if self.pose_basis.shape != (3 * n, 9 * (j - 1)):
            raise InvalidInputError("pose_basis must be (3n, 9 * (n_joints - 1))")
        if self.joint_regressor.shape != (j, n):
            raise InvalidInputError("joint_regressor must be (n_joints, n_vertices)")
        if np.abs(self.joint_regressor.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidInputError("joint_regressor rows must sum to 1")
        if self.weights.shape != (n, j):
            raise InvalidInputError("weights must be (n_vertices, n_joints)")
        if self.weights.min() < -1e-9 or np.abs(self.weights.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidInputError("skinning weight rows must be convex")
        self._topo = _toposort(self.parents)
        if self.shape_basis_orthonormal and self.shape_basis.size:
            gram = self.shape_basis.T @ self.shape_basis
            if np.abs(gram - np.eye(gram.shape[0])).max() > 1e-6:
                raise InvalidInputError("shape basis declared orthonormal but is not (1e-6)")

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def root(self) -> int:
        return self._topo[0]

    def mesh(self, vertices: np.ndarray) -> Mesh:
        return Mesh(vertices, self.faces, self.uv_coords, self.uv_faces)


def _toposort(parents: np.ndarray) -> np.ndarray:
    """Root-first ordering; validates the tree (single root, no cycles)."""
    j = len(parents)
    if j < 1:
        raise InvalidInputError("need at least one joint")
    roots = np.nonzero(parents < 0)[0]
    if len(roots) != 1:
        raise InvalidInputError(f"parent tree must have exactly one root, found {len(roots)}")
    if (parents >= j).any():
        raise InvalidInputError("parent index out of range")
    order, seen = [int(roots[0])], {int(roots[0])}
    children = {k: [] for k in range(j)}
    for k in range(j):
        if parents[k] >= 0:
            children[int(parents[k])].append(k)
    stack = list(reversed(children[order[0]]))
    while stack:
        k = stack.pop()
        order.append(k)
        seen.add(k)
        stack.extend(reversed(children[k]))
    if len(order) != j:
        raise InvalidInputError("parent tree contains a cycle or unreachable joints")
    return np.array(order, dtype=np.int64)


# ---------------------------------------------------------------------------
# Shaping and posing


def pose_feature(theta: np.ndarray, root: int) -> np.ndarray:
    """Flattened (R_j - I) over non-root joints, 9 entries each, joint order."""
    R = rodrigues(np.asarray(theta, dtype=np.float64).reshape(-1, 3))
    idx = [k for k in range(len(R)) if k != root]
    return (R[idx] - np.eye(3)).reshape(-1)


def shaped_vertices(body: ParametricBody, beta: np.ndarray) -> np.ndarray:
    """Template plus the shape blendshape (pose corrective excluded)."""
    beta = np.asarray(beta, dtype=np.float64).ravel()
    out = body.template_vertices.copy()
    if len(beta):
        out = out + (body.shape_basis @ beta).reshape(-1, 3)
    return out


def rest_shape(body: ParametricBody, params: BodyParams) -> np.ndarray:
    """Unposed vertices with shape and pose correctives applied."""
    out = shaped_vertices(body, params.beta)
    feat = pose_feature(params.theta, body.root)
    return out + (body.pose_basis @ feat).reshape(-1, 3)


def joint_positions(body: ParametricBody, beta: np.ndarray) -> np.ndarray:
    """Rest joints regressed from the shaped template."""
    return body.joint_regressor @ shaped_vertices(body, beta)


def forward_kinematics(rest_joints: np.ndarray, local_rot: np.ndarray,
                       parents: np.ndarray, topo: np.ndarray):
    """Global rotations and posed joint positions for the whole tree.

    Joint displacements from the rest pose are accumulated separately so the
    identity pose reproduces the rest joints bit-for-bit.
    """
    j = len(parents)
    eye = np.eye(3)
    Rg = np.empty((j, 3, 3))
    off = np.zeros((j, 3))
    for k in topo:
        par = parents[k]
        if par < 0:
            Rg[k] = local_rot[k]
        else:
            Rg[k] = Rg[par] @ local_rot[k]
            bone = rest_joints[k] - rest_joints[par]
            off[k] = off[par] + (Rg[par] - eye) @ bone
    return Rg, rest_joints + off


class PosedBody:
    """Forward pose evaluation with cached state for gradient pullback.

    ``backward`` maps gradients w.r.t. posed vertices and/or posed joints to
    gradients w.r.t. (beta, theta, translation); extra rest-vertex offsets
    (clothing) enter through ``rest_offsets``.
    """

    def __init__(self, body: ParametricBody, params: BodyParams,
                 rest_offsets: np.ndarray | None = None):
        self.body = body
        self.params = params
        if len(params.theta) != 3 * body.n_joints:
            raise InvalidInputError("theta length does not match the joint count")
        if len(params.beta) != body.n_shape:
            raise InvalidInputError("beta length does not match the shape basis")
        self.shaped = shaped_vertices(body, params.beta)
        self.rest_joints = body.joint_regressor @ self.shaped
        self.local_rot = rodrigues(params.theta.reshape(-1, 3))
        feat = pose_feature(params.theta, body.root)
        self.rest_vertices = self.shaped + (body.pose_basis @ feat).reshape(-1, 3)
        if rest_offsets is not None:
            self.rest_vertices = self.rest_vertices + rest_offsets
        self.global_rot, self.posed_joints = forward_kinematics(
            self.rest_joints, self.local_rot, body.parents, body._topo)
        self.vertices = skin_lbs(self.rest_vertices, self.rest_joints, self.global_rot,
                                 self.posed_joints - self.rest_joints, body.weights)
        self.vertices = self.vertices + params.translation

    def linear_maps(self):
        """Per-vertex affine skinning maps (B, o): posed = B x_rest + o + t."""
        B, o = lbs_linear_maps(self.rest_joints, self.global_rot,
                               self.posed_joints - self.rest_joints, self.body.weights)
        return B, o + self.params.translation

    def backward(self, grad_vertices: np.ndarray | None = None,
                 grad_joints: np.ndarray | None = None) -> dict:
        body = self.body
        n, j = body.n_vertices, body.n_joints
        W = body.weights
        gv = np.zeros((n, 3)) if grad_vertices is None else np.asarray(grad_vertices, dtype=np.float64)
        g_p = np.zeros((j, 3)) if grad_joints is None else np.asarray(grad_joints, dtype=np.float64).copy()

        g_Rg = np.zeros((j, 3, 3))
        g_rest = np.zeros((n, 3))
        g_jr = np.zeros((j, 3))
        g_trans = gv.sum(axis=0)
        if grad_vertices is not None:
            wgv = W[:, :, None] * gv[:, None, :]  # (n, j, 3)
            g_Rg += np.einsum("nja,nb->jab", wgv, self.rest_vertices) \
                - np.einsum("nja,jb->jab", wgv, self.rest_joints)
            g_p += wgv.sum(axis=0)
            g_rest += np.einsum("nj,jab,na->nb", W, self.global_rot, gv)
            g_jr += -np.einsum("nja,jab->jb", wgv, self.global_rot)

        # Reverse kinematics: children before parents.
        g_Rloc = np.zeros((j, 3, 3))
        for k in self.body._topo[::-1]:
            par = body.parents[k]
            if par < 0:
                g_Rloc[k] += g_Rg[k]
                g_jr[k] += g_p[k]
            else:
                g_Rloc[k] += self.global_rot[par].T @ g_Rg[k]
                g_Rg[par] += g_Rg[k] @ self.local_rot[k].T
                g_p[par] += g_p[k]
                d = self.rest_joints[k] - self.rest_joints[par]
                g_Rg[par] += np.outer(g_p[k], d)
                back = self.global_rot[par].T @ g_p[k]
                g_jr[k] += back
                g_jr[par] -= back

        # Pose corrective: rest = shaped + P f(theta), f stacks (R_j - I).
        if body.pose_basis.size and grad_vertices is not None:
            g_feat = body.pose_basis.T @ g_rest.ravel()
            nonroot = [k for k in range(j) if k != body.root]
            g_Rloc[nonroot] += g_feat.reshape(-1, 3, 3)

        jac = rodrigues_jacobian(self.params.theta.reshape(-1, 3))
        g_theta = np.einsum("jmn,jmnk->jk", g_Rloc, jac).ravel()

        g_shaped = g_rest + body.joint_regressor.T @ g_jr
        g_beta = body.shape_basis.T @ g_shaped.ravel()
        return {"beta": g_beta, "theta": g_theta, "translation": g_trans,
                "rest_vertices": g_rest}


def pose_body(body: ParametricBody, params: BodyParams) -> Mesh:
    """Posed body mesh for the given parameters."""
    return body.mesh(PosedBody(body, params).vertices)


# ---------------------------------------------------------------------------
# Deterministic test body: capsule limbs on a canonical 16-joint skeleton

_CANON_JOINTS = np.array([
    [0.00, 0.00, 0.00],    # 0 pelvis (root)
    [0.00, -0.18, 0.00],   # 1 spine
    [0.00, -0.37, 0.00],   # 2 chest
    [0.00, -0.58, 0.00],   # 3 head
    [-0.16, -0.44, 0.00],  # 4 left shoulder
    [0.16, -0.44, 0.00],   # 5 right shoulder
    [-0.42, -0.44, 0.00],  # 6 left elbow
    [0.42, -0.44, 0.00],   # 7 right elbow
    [-0.66, -0.44, 0.00],  # 8 left wrist
    [0.66, -0.44, 0.00],   # 9 right wrist
    [-0.10, 0.06, 0.00],   # 10 left hip
    [0.10, 0.06, 0.00],    # 11 right hip
    [-0.10, 0.46, 0.00],   # 12 left knee
    [0.10, 0.46, 0.00],    # 13 right knee
    [-0.10, 0.84, 0.00],   # 14 left ankle
    [0.10, 0.84, 0.00],    # 15 right ankle
])
_CANON_PARENTS = [-1, 0, 1, 2, 2, 2, 4, 5, 6, 7, 0, 0, 10, 11, 12, 13]
_CANON_RADII = {  # capsule radius per bone, keyed by child joint
    1: 0.145, 2: 0.150, 3: 0.095, 4: 0.075, 5: 0.075, 6: 0.048, 7: 0.048,
    8: 0.042, 9: 0.042, 10: 0.085, 11: 0.085, 12: 0.070, 13: 0.070,
    14: 0.052, 15: 0.052,
}

# Upper/lower garment support, keyed by bone child joint (used by the
# synthetic harness to place toy garments; hip bones appear in both so the
# waist band genuinely overlaps).
MINI_UPPER_BONES = (1, 2, 4, 5, 6, 7)
MINI_LOWER_BONES = (10, 11, 12, 13)
MINI_SHIN_BONES = (14, 15)


def _capsule(a, b, radius, n_seg, n_rings):
    """Closed capsule around segment a-b; returns (verts, faces, ring_v, seam_u).

    ``ring_v`` is the per-ring profile parameter in [0, 1] (0 at the a pole),
    used for UVs; vertices are two poles + n_rings rings of n_seg.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)

    n_cap = max(2, n_rings // 4)
    n_mid = max(2, n_rings - 2 * n_cap)
    centers, radii = [], []
    for i in range(1, n_cap + 1):           # cap at a, pole first
        phi = 0.5 * np.pi * i / (n_cap + 0)
        centers.append(a - u * radius * np.cos(phi))
        radii.append(radius * np.sin(phi))
    for i in range(1, n_mid):               # cylinder interior rings
        centers.append(a + u * (length * i / n_mid))
        radii.append(radius)
    for i in range(n_cap, 0, -1):           # cap at b
        phi = 0.5 * np.pi * i / (n_cap + 0)
        centers.append(b + u * radius * np.cos(phi))
        radii.append(radius * np.sin(phi))

    rings = len(centers)
    ang = 2.0 * np.pi * np.arange(n_seg) / n_seg
    dirs = np.outer(np.cos(ang), e1) + np.outer(np.sin(ang), e2)
    verts = [a - u * radius, b + u * radius]
    for c, r in zip(centers, radii):
        verts.extend(c + r * dirs)
    verts = np.asarray(verts)

    def ring(idx):
        return 2 + idx * n_seg + np.arange(n_seg)

    faces = []
    r0, rl = ring(0), ring(rings - 1)
    for k in range(n_seg):
        faces.append([0, r0[(k + 1) % n_seg], r0[k]])
    for k in range(n_seg):
        faces.append([1, rl[k], rl[(k + 1) % n_seg]])
    for i in range(rings - 1):
        ra, rb = ring(i), ring(i + 1)
        for k in range(n_seg):
            k1 = (k + 1) % n_seg
            faces.append([ra[k], ra[k1], rb[k]])
            faces.append([ra[k1], rb[k1], rb[k]])
    faces = np.asarray(faces, dtype=np.int32)

    # Axial profile parameter per ring for UVs.
    axial = [float(np.dot(c - a, u)) + radius for c in centers]
    total = length + 2.0 * radius
    ring_v = np.asarray(axial) / total
    return verts, faces, ring_v


def _capsule_uvs(n_seg, ring_v, n_rings, cell):
    """UV atlas for one capsule inside rectangle ``cell`` = (u0, v0, du, dv).

    The wrap seam duplicates the first column; each pole fan triangle gets its
    own pole UV so the atlas stays injective per face.
    """
    u0, v0, du, dv = cell
    cols = np.arange(n_seg + 1) / n_seg
    grid = []
    for rv in ring_v:
        for c in cols:
            grid.append([u0 + c * du, v0 + rv * dv])
    grid = np.asarray(grid)

    def gidx(ring_i, col):
        return ring_i * (n_seg + 1) + col

    uv_faces = []
    uv_extra = []
    base_extra = len(grid)
    # Fans: same ordering as the face construction above.
    for k in range(n_seg):
        mid = u0 + (k + 0.5) / n_seg * du
        uv_extra.append([mid, v0])
        uv_faces.append([base_extra + len(uv_extra) - 1, gidx(0, k + 1), gidx(0, k)])
    for k in range(n_seg):
        mid = u0 + (k + 0.5) / n_seg * du
        uv_extra.append([mid, v0 + dv])
        uv_faces.append([base_extra + len(uv_extra) - 1, gidx(n_rings - 1, k), gidx(n_rings - 1, k + 1)])
    for i in range(n_rings - 1):
        for k in range(n_seg):
            uv_faces.append([gidx(i, k), gidx(i, k + 1), gidx(i + 1, k)])
            uv_faces.append([gidx(i, k + 1), gidx(i + 1, k + 1), gidx(i + 1, k)])
    uvs = np.concatenate([grid, np.asarray(uv_extra)])
    return uvs, np.asarray(uv_faces, dtype=np.int32)


def make_mini_body(seed: int = 0, n_vertices: int = 2000, n_joints: int = 16,
                   n_shape: int = 8) -> ParametricBody:
    """Deterministic capsule-limb humanoid for tests and synthetic data.

    The skeleton is a fixed 16-joint tree (pelvis root, spine/chest/head,
    shoulder-elbow-wrist arms, hip-knee-ankle legs) truncated to ``n_joints``;
    extra joints beyond 16 extend a chain from the last joint. Every bone gets
    a closed capsule, so the mesh is a disjoint union of closed manifold
    components with a per-capsule UV atlas. The shape basis is a set of
    orthonormalized smooth radial bumps; the pose corrective basis is zero.
    """
    if n_vertices < 100:
        raise InvalidInputError("mini body needs n_vertices >= 100")
    if n_joints < 4:
        raise InvalidInputError("mini body needs n_joints >= 4")
    if n_shape < 1:
        raise InvalidInputError("mini body needs n_shape >= 1")
    rng = np.random.default_rng(seed)

    joints = _CANON_JOINTS.copy()
    parents = list(_CANON_PARENTS)
    radii = dict(_CANON_RADII)
    if n_joints <= 16:
        joints = joints[:n_joints]
        parents = parents[:n_joints]
        radii = {c: r for c, r in radii.items() if c < n_joints}
    else:
        for extra in range(16, n_joints):
            joints = np.vstack([joints, joints[extra - 1] + (0.0, 0.06, 0.0)])
            parents.append(extra - 1)
            radii[extra] = 0.03
    parents = np.asarray(parents, dtype=np.int64)
    bones = [(int(parents[c]), c) for c in range(len(parents)) if parents[c] >= 0]

    # Split the vertex budget across capsules by lateral surface area.
    areas = np.array([2.0 * np.pi * radii[c]
                      * (np.linalg.norm(joints[c] - joints[p]) + 2.0 * radii[c])
                      for p, c in bones])
    budget = np.maximum(40, (n_vertices * areas / areas.sum()).astype(int))

    n_caps = len(bones)
    cols = int(np.ceil(np.sqrt(n_caps)))
    rows = int(np.ceil(n_caps / cols))

    all_v, all_f, all_uv, all_uvf = [], [], [], []
    v_off = uv_off = 0
    for ci, (p, c) in enumerate(bones):
        length = np.linalg.norm(joints[c] - joints[p]) + 2.0 * radii[c]
        n_seg = int(np.clip(np.round(np.sqrt(budget[ci] * 2.0 * np.pi * radii[c] / length)), 6, 40))
        n_rings = max(5, int(np.round(budget[ci] / n_seg)))
        verts, faces, ring_v = _capsule(joints[p], joints[c], radii[c], n_seg, n_rings)
        n_rings_actual = (len(verts) - 2) // n_seg
        cell_w, cell_h = 1.0 / cols, 1.0 / rows
        pad = 0.06
        cell = ((ci % cols + pad) * cell_w, (ci // cols + pad) * cell_h,
                cell_w * (1 - 2 * pad), cell_h * (1 - 2 * pad))
        uvs, uv_faces = _capsule_uvs(n_seg, ring_v, n_rings_actual, cell)
        all_v.append(verts)
        all_f.append(faces + v_off)
        all_uv.append(uvs)
        all_uvf.append(uv_faces + uv_off)
        v_off += len(verts)
        uv_off += len(uvs)

    vertices = np.concatenate(all_v)
    faces = np.concatenate(all_f)
    uvs = np.concatenate(all_uv)
    uv_faces = np.concatenate(all_uvf)
    n = len(vertices)

    # Smooth proximity skinning: each bone pulls toward its parent joint.
    tau = 0.045
    scores = np.zeros((n, len(parents)))
    for p, c in bones:
        d = _point_segment_distance(vertices, joints[p], joints[c])
        scores[:, p] += np.exp(-((np.maximum(d - radii[c], 0.0)) / tau) ** 2)
    scores += 1e-12  # guard fully-unsupported vertices
    weights = scores / scores.sum(axis=1, keepdims=True)

    # Gaussian vertex neighborhoods regress the joints; rows sum to 1.
    regressor = np.zeros((len(parents), n))
    for k in range(len(parents)):
        rho = 1.3 * max([radii[c] for p, c in bones if k in (p, c)] or [0.08])
        s = np.exp(-np.sum((vertices - joints[k]) ** 2, axis=1) / rho**2)
        regressor[k] = s / s.sum()
    joints = regressor @ vertices  # make the skeleton exactly self-consistent

    # Orthonormalized smooth radial bumps as the shape basis.
    fields = np.zeros((3 * n, n_shape))
    for k in range(n_shape):
        p, c = bones[int(rng.integers(len(bones)))]
        t = rng.uniform()
        anchor = joints[p] + t * (joints[c] - joints[p]) + rng.normal(scale=0.05, size=3)
        sigma = rng.uniform(0.15, 0.35)
        g = np.exp(-np.sum((vertices - anchor) ** 2, axis=1) / sigma**2)
        d = vertices - anchor
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-9)
        fields[:, k] = (g[:, None] * d).ravel()
    q, r = np.linalg.qr(fields)
    q *= np.sign(np.diag(r))[None, :]
    pose_basis = np.zeros((3 * n, 9 * (len(parents) - 1)))

    # Round every float payload to float32 so the on-disk container (which
    # stores f32 blobs) reloads the model bit-for-bit.
    def f32(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    return ParametricBody(f32(vertices), faces, f32(q), pose_basis,
                          f32(regressor), f32(weights), parents,
                          f32(uvs), uv_faces, shape_basis_orthonormal=True)


def _point_segment_distance(points, a, b):
    d = b - a
    dd = float(d @ d)
    t = np.clip((points - a) @ d / max(dd, 1e-30), 0.0, 1.0)
    closest = a + t[:, None] * d
    return np.linalg.norm(points - closest, axis=1)


# ---------------------------------------------------------------------------
# Container I/O


def save_body(path, body: ParametricBody) -> None:
    arrays = {
        "template": body.template_vertices,
        "shape_basis": body.shape_basis,
        "pose_basis": body.pose_basis,
        "regressor": body.joint_regressor,
        "weights": body.weights,
        "faces": body.faces.astype(np.uint32),
    }
    if body.uv_coords is not None:
        arrays["uvs"] = body.uv_coords
        arrays["uv_faces"] = body.uv_faces.astype(np.uint32)
    meta = {
        "n_vertices": body.n_vertices,
        "n_joints": body.n_joints,
        "n_shape": body.n_shape,
        "parents": body.parents.tolist(),
        "shape_basis_orthonormal": bool(body.shape_basis_orthonormal),
    }
    container.write_container(path, "parametric_body", meta, arrays)


def load_body(path) -> ParametricBody:
    manifest, arrays = container.read_container(path, expected_kind="parametric_body")
    uvs = arrays.get("uvs")
    uv_faces = arrays.get("uv_faces")
    return ParametricBody(
        arrays["template"], arrays["faces"].astype(np.int32),
        arrays["shape_basis"], arrays["pose_basis"], arrays["regressor"],
        arrays["weights"], np.asarray(manifest["parents"], dtype=np.int64),
        uvs, uv_faces.astype(np.int32) if uv_faces is not None else None,
        shape_basis_orthonormal=bool(manifest.get("shape_basis_orthonormal", False)))
