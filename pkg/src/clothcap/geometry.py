"""Triangle mesh container and the geometry operators built on it.

Everything here is plain numpy: vertices are (n, 3) float64, faces (m, 3)
int32 referencing vertices. Texture coordinates are optional and carry their
own index triple per face so atlas seams can split UVs without splitting
geometry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInputError, TopologyError

DEGENERATE_AREA = 1e-12  # faces below this area (m^2) contribute no normal


@dataclass
class Mesh:
    """Indexed triangle mesh with optional UV atlas.

    Attributes
    ----------
    vertices : (n, 3) float64
    faces : (m, 3) int32, counter-clockwise orientation
    uv_coords : (k, 2) float64 or None
    uv_faces : (m, 3) int32 or None, parallel to ``faces``
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray | None = None
    uv_faces: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise InvalidInputError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InvalidInputError(f"faces must be (m, 3), got {self.faces.shape}")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise InvalidInputError("face indices out of range")
            same = ((self.faces[:, 0] == self.faces[:, 1])
                    | (self.faces[:, 1] == self.faces[:, 2])
                    | (self.faces[:, 0] == self.faces[:, 2]))
            if same.any():
                raise InvalidInputError(
                    f"faces with repeated vertices: {np.nonzero(same)[0][:8].tolist()}")
        if (self.uv_coords is None) != (self.uv_faces is None):
            raise InvalidInputError("uv_coords and uv_faces must be given together")
        if self.uv_coords is not None:
            self.uv_coords = np.ascontiguousarray(self.uv_coords, dtype=np.float64)
            self.uv_faces = np.ascontiguousarray(self.uv_faces, dtype=np.int32)
            if self.uv_coords.ndim != 2 or self.uv_coords.shape[1] != 2:
                raise InvalidInputError(f"uv_coords must be (k, 2), got {self.uv_coords.shape}")
            if self.uv_faces.shape != self.faces.shape:
                raise InvalidInputError("uv_faces must parallel faces")
            if len(self.uv_faces) and (self.uv_faces.min() < 0
                                       or self.uv_faces.max() >= len(self.uv_coords)):
                raise InvalidInputError("uv_face indices out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same connectivity, new vertex positions."""
        return Mesh(vertices, self.faces, self.uv_coords, self.uv_faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (e, 2) int array."""
        return unique_edges(self.faces)


def unique_edges(faces: np.ndarray) -> np.ndarray:
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e.astype(np.int64), axis=1)
    return np.unique(e, axis=0)


def _edge_face_counts(faces: np.ndarray):
    """Returns (edges, counts, edge_index_per_face_side)."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e.astype(np.int64), axis=1)
    edges, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    return edges, counts, inverse.reshape(3, len(faces)).T


# ---------------------------------------------------------------------------
# Linear blend skinning


def skin_lbs(rest_vertices: np.ndarray, joints: np.ndarray, rotations: np.ndarray,
             joint_translations: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Blend per-joint rigid transforms over rest vertices.

    Joint ``j`` maps a point ``x`` to ``R_j (x - joints[j]) + joints[j] +
    joint_translations[j]`` (rotation about the joint pivot, then the joint's
    own displacement). The output vertex is the weight-blended combination of
    all joint maps.

    Parameters
    ----------
    rest_vertices : (n, 3)
    joints : (j, 3) rest joint positions (the rotation pivots)
    rotations : (j, 3, 3) per-joint rotation matrices
    joint_translations : (j, 3) displacement of each joint pivot
    weights : (n, j) convex weights, rows sum to 1
    """
    rest_vertices = np.asarray(rest_vertices, dtype=np.float64)
    joints = np.asarray(joints, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    joint_translations = np.asarray(joint_translations, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)

    n, j = len(rest_vertices), len(joints)
    if rotations.shape != (j, 3, 3) or joint_translations.shape != (j, 3):
        raise InvalidInputError("pose arrays must be (j, 3, 3) rotations and (j, 3) translations")
    if weights.shape != (n, j):
        raise InvalidInputError(f"weights must be ({n}, {j}), got {weights.shape}")
    if weights.min() < -1e-9:
        raise InvalidInputError("skinning weights must be non-negative")
    if np.abs(weights.sum(axis=1) - 1.0).max() > 1e-6:
        raise InvalidInputError("skinning weight rows must sum to 1")
    err = np.einsum("jab,jcb->jac", rotations, rotations) - np.eye(3)
    if np.abs(err).max() > 1e-6:
        raise InvalidInputError("rotations must be orthonormal within 1e-6")

    # Blend the per-joint displacements rather than the mapped points, and
    # divide by the row sum: the identity pose then returns the input
    # vertices bit-for-bit, and weight rows that sum to 1 only within the
    # 1e-6 tolerance (e.g. after float32 storage) still give an exactly
    # convex blend, keeping rigid equivariance at machine precision.
    acc = np.zeros_like(rest_vertices)
    eye = np.eye(3)
    for k in range(j):
        delta = (rest_vertices - joints[k]) @ (rotations[k] - eye).T
        acc += weights[:, k, None] * (delta + joint_translations[k])
    return rest_vertices + acc / weights.sum(axis=1, keepdims=True)


def lbs_linear_maps(joints: np.ndarray, rotations: np.ndarray,
                    joint_translations: np.ndarray, weights: np.ndarray):
    """Per-vertex affine form of the blend: ``v_i = B_i x_i + o_i``.

    With the pose held fixed, skinning is affine in each rest vertex; the
    returned ``B`` (n, 3, 3) and ``o`` (n, 3) satisfy
    ``skin_lbs(X, ...) == einsum('nij,nj->ni', B, X) + o``.
    """
    joints = np.asarray(joints, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    joint_translations = np.asarray(joint_translations, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    B = np.einsum("nj,jab->nab", weights, rotations)
    pivots = joints + joint_translations - np.einsum("jab,jb->ja", rotations, joints)
    o = weights @ pivots
    return B, o


# ---------------------------------------------------------------------------
# Loop subdivision


def _loop_even_weights(valence: np.ndarray) -> np.ndarray:
    # Loop's original beta: (1/k) * (5/8 - (3/8 + cos(2 pi / k) / 4)^2)
    k = valence.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = (5.0 / 8.0 - (3.0 / 8.0 + 0.25 * np.cos(2.0 * np.pi / k)) ** 2) / k
    return beta


def _subdivide_positions(points: np.ndarray, faces: np.ndarray):
    """One Loop pass on an arbitrary-dimension point set; returns
    (new_points, new_faces). Raises TopologyError on edges with > 2 faces."""
    n = len(points)
    edges, counts, face_edge = _edge_face_counts(faces)
    if counts.max(initial=0) > 2:
        bad = edges[counts > 2][:4].tolist()
        raise TopologyError(f"non-manifold edges (more than 2 incident faces): {bad}")

    boundary = counts == 1
    n_e = len(edges)

    # Opposite-vertex sums per edge for the interior odd rule.
    opp_sum = np.zeros((n_e, points.shape[1]))
    for side, opp_col in ((0, 2), (1, 0), (2, 1)):
        np.add.at(opp_sum, face_edge[:, side], points[faces[:, opp_col]])

    odd = 0.375 * (points[edges[:, 0]] + points[edges[:, 1]]) + 0.125 * opp_sum
    odd[boundary] = 0.5 * (points[edges[boundary, 0]] + points[edges[boundary, 1]])

    # Even vertices: interior Loop stencil, crease rule on boundaries.
    valence = np.zeros(n, dtype=np.int64)
    np.add.at(valence, edges.ravel(), 1)
    nbr_sum = np.zeros((n, points.shape[1]))
    np.add.at(nbr_sum, edges[:, 0], points[edges[:, 1]])
    np.add.at(nbr_sum, edges[:, 1], points[edges[:, 0]])

    beta = _loop_even_weights(np.maximum(valence, 1))
    even = (1.0 - valence * beta)[:, None] * points + beta[:, None] * nbr_sum

    b_edges = edges[boundary]
    b_count = np.zeros(n, dtype=np.int64)
    np.add.at(b_count, b_edges.ravel(), 1)
    if (b_count > 2).any():
        raise TopologyError("vertex on more than two boundary edges")
    b_sum = np.zeros((n, points.shape[1]))
    np.add.at(b_sum, b_edges[:, 0], points[b_edges[:, 1]])
    np.add.at(b_sum, b_edges[:, 1], points[b_edges[:, 0]])
    on_boundary = b_count == 2
    even[on_boundary] = 0.75 * points[on_boundary] + 0.125 * b_sum[on_boundary]
    lonely = valence == 0
    if lonely.any():
        even[lonely] = points[lonely]

    new_points = np.concatenate([even, odd])
    m = n + face_edge  # edge-vertex indices per face side
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab, mbc, mca = m[:, 0], m[:, 1], m[:, 2]
    new_faces = np.concatenate([
        np.stack([a, mab, mca], axis=1),
        np.stack([b, mbc, mab], axis=1),
        np.stack([c, mca, mbc], axis=1),
        np.stack([mab, mbc, mca], axis=1),
    ]).astype(np.int32)
    return new_points, new_faces


def loop_subdivide(mesh: Mesh) -> Mesh:
    """One round of Loop subdivision (V + E vertices, 4F faces).

    UVs, when present, are subdivided with the same weights on the UV
    connectivity, so atlas seams (UV boundaries) follow the crease rules.
    """
    if mesh.n_faces == 0:
        raise InvalidInputError("cannot subdivide a mesh without faces")
    verts, new_faces = _subdivide_positions(mesh.vertices, mesh.faces)
    uv_coords = uv_faces = None
    if mesh.uv_coords is not None:
        uv_coords, uv_faces = _subdivide_positions(mesh.uv_coords, mesh.uv_faces)
    return Mesh(verts, new_faces, uv_coords, uv_faces)


# ---------------------------------------------------------------------------
# Laplacian and normals


def uniform_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Umbrella Laplacian: row i is vertex i minus the mean of its neighbors.

    Isolated vertices get an all-zero row and trigger a warning.
    """
    n = mesh.n_vertices
    edges = mesh.edges()
    if len(edges) == 0:
        raise InvalidInputError("mesh has no edges")
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    deg = np.zeros(n)
    np.add.at(deg, rows, 1.0)
    isolated = deg == 0
    if isolated.any():
        warnings.warn(f"{int(isolated.sum())} isolated vertices get zero Laplacian rows")
    inv_deg = np.zeros(n)
    inv_deg[~isolated] = 1.0 / deg[~isolated]
    off = sp.csr_matrix((-inv_deg[rows], (rows, cols)), shape=(n, n))
    diag = sp.diags(np.where(isolated, 0.0, 1.0))
    return (diag + off).tocsr()


def face_cross_products(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (cross products, length = 2 * area)."""
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    return np.cross(e1, e2)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray,
                   warn_degenerate: bool = True) -> np.ndarray:
    """Area-weighted unit vertex normals; zero-area accumulations fall back to +z."""
    vertices = np.asarray(vertices, dtype=np.float64)
    cross = face_cross_products(vertices, faces)
    area2 = np.linalg.norm(cross, axis=1)
    degenerate = area2 < 2.0 * DEGENERATE_AREA
    if degenerate.any() and warn_degenerate:
        warnings.warn(f"skipping {int(degenerate.sum())} degenerate faces in normal computation")
    cross = np.where(degenerate[:, None], 0.0, cross)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], cross)
    norm = np.linalg.norm(acc, axis=1)
    zero = norm < 1e-20
    out = np.empty_like(acc)
    out[~zero] = acc[~zero] / norm[~zero, None]
    out[zero] = (0.0, 0.0, 1.0)
    return out


def vertex_normals_vjp(vertices: np.ndarray, faces: np.ndarray,
                       grad_normals: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit vertex normals back to vertex positions.

    Mirrors ``vertex_normals`` exactly: degenerate faces contribute nothing,
    +z fallbacks have zero gradient.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    cross = face_cross_products(vertices, faces)
    area2 = np.linalg.norm(cross, axis=1)
    degenerate = area2 < 2.0 * DEGENERATE_AREA
    cross_eff = np.where(degenerate[:, None], 0.0, cross)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], cross_eff)
    norm = np.linalg.norm(acc, axis=1)
    zero = norm < 1e-20

    # d(unit)/d(acc) = (I - n n^T) / |acc|
    safe = np.where(zero, 1.0, norm)
    unit = acc / safe[:, None]
    g = np.asarray(grad_normals, dtype=np.float64)
    g_acc = (g - unit * np.sum(unit * g, axis=1, keepdims=True)) / safe[:, None]
    g_acc[zero] = 0.0

    # Each face's cross product feeds all three of its corner accumulators.
    g_cross = g_acc[faces[:, 0]] + g_acc[faces[:, 1]] + g_acc[faces[:, 2]]
    g_cross[degenerate] = 0.0
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    g_e1 = np.cross(e2, g_cross)
    g_e2 = np.cross(g_cross, e1)
    out = np.zeros_like(vertices)
    np.add.at(out, faces[:, 1], g_e1)
    np.add.at(out, faces[:, 2], g_e2)
    np.add.at(out, faces[:, 0], -(g_e1 + g_e2))
    return out


# ---------------------------------------------------------------------------
# Point-to-surface distance

BVH_FACE_THRESHOLD = 50_000  # brute force below, BVH above
_BVH_LEAF = 8


def _point_triangle_sq(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact squared distances, points (p, 3) against triangles (t, 3, 3).

    Returns a (p, t) matrix. Projection onto the triangle plane decides
    between the face-interior distance and the nearest of the three edges.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    nn = np.einsum("td,td->t", n, n)
    good = nn > 1e-30

    ap = points[:, None, :] - a[None, :, :]  # (p, t, 3)
    # Barycentric coefficients of the plane projection.
    d00 = np.einsum("td,td->t", ab, ab)
    d01 = np.einsum("td,td->t", ab, ac)
    d11 = np.einsum("td,td->t", ac, ac)
    d20 = np.einsum("ptd,td->pt", ap, ab)
    d21 = np.einsum("ptd,td->pt", ap, ac)
    denom = np.where(good, d00 * d11 - d01 * d01, 1.0)
    v = (d11 * d20 - d01 * d21) / denom
    w = (d00 * d21 - d01 * d20) / denom
    inside = good & (v >= 0.0) & (w >= 0.0) & (v + w <= 1.0)

    dist_plane = np.einsum("ptd,td->pt", ap, n) ** 2 / np.where(good, nn, 1.0)

    def seg_sq(p0, p1):
        d = p1 - p0
        dd = np.einsum("td,td->t", d, d)
        t = np.einsum("ptd,td->pt", points[:, None, :] - p0[None, :, :], d)
        t = np.clip(t / np.where(dd > 1e-30, dd, 1.0), 0.0, 1.0)
        closest = p0[None, :, :] + t[:, :, None] * d[None, :, :]
        diff = points[:, None, :] - closest
        return np.einsum("ptd,ptd->pt", diff, diff)

    edge = np.minimum(seg_sq(a, b), np.minimum(seg_sq(b, c), seg_sq(c, a)))
    return np.where(inside, dist_plane, edge)


def point_to_surface_brute(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Per-point exact distances by scanning every triangle (chunked)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]
    out = np.empty(len(points))
    # Chunk to bound the (p, t) temporary near ~24 MB.
    chunk = max(1, int(3e6) // max(1, len(tri)))
    for s in range(0, len(points), chunk):
        out[s:s + chunk] = np.sqrt(_point_triangle_sq(points[s:s + chunk], tri).min(axis=1))
    return out


class _BvhNode:
    __slots__ = ("lo", "hi", "left", "right", "face_ids")

    def __init__(self, lo, hi, left=None, right=None, face_ids=None):
        self.lo, self.hi = lo, hi
        self.left, self.right = left, right
        self.face_ids = face_ids


def _build_bvh(tri: np.ndarray, ids: np.ndarray) -> _BvhNode:
    lo = tri[ids].min(axis=(1,)).min(axis=0)
    hi = tri[ids].max(axis=(1,)).max(axis=0)
    if len(ids) <= _BVH_LEAF:
        return _BvhNode(lo, hi, face_ids=ids)
    cent = tri[ids].mean(axis=1)
    axis = int(np.argmax(hi - lo))
    order = np.argsort(cent[:, axis], kind="stable")
    half = len(ids) // 2
    return _BvhNode(lo, hi,
                    left=_build_bvh(tri, ids[order[:half]]),
                    right=_build_bvh(tri, ids[order[half:]]))


def _aabb_sq(point: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    d = np.maximum(np.maximum(lo - point, point - hi), 0.0)
    return float(d @ d)


def point_to_surface_bvh(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Per-point exact distances through an AABB tree with branch-and-bound."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.vertices[mesh.faces]
    root = _build_bvh(tri, np.arange(len(tri)))
    out = np.empty(len(points))
    for i, p in enumerate(points):
        best = np.inf
        stack = [(_aabb_sq(p, root.lo, root.hi), root)]
        while stack:
            bound, node = stack.pop()
            if bound >= best:
                continue
            if node.face_ids is not None:
                d = _point_triangle_sq(p[None], tri[node.face_ids]).min()
                best = min(best, float(d))
                continue
            children = []
            for ch in (node.left, node.right):
                b = _aabb_sq(p, ch.lo, ch.hi)
                if b < best:
                    children.append((b, ch))
            children.sort(key=lambda t: -t[0])  # nearest popped first
            stack.extend(children)
        out[i] = np.sqrt(best)
    return out


def point_to_surface(points: np.ndarray, mesh: Mesh) -> float:
    """Mean exact distance from ``points`` to the mesh surface (meters)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        raise InvalidInputError("point set is empty")
    if mesh.n_faces == 0:
        raise InvalidInputError("mesh has no faces")
    if mesh.n_faces < BVH_FACE_THRESHOLD:
        d = point_to_surface_brute(points, mesh)
    else:
        d = point_to_surface_bvh(points, mesh)
    return float(d.mean())


# ---------------------------------------------------------------------------
# Wavefront OBJ I/O


def write_obj(path, mesh: Mesh) -> None:
    """ASCII OBJ with v/vt/f records, 9 significant digits, input face order."""
    lines = []
    for v in mesh.vertices:
        lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    has_uv = mesh.uv_coords is not None
    if has_uv:
        for t in mesh.uv_coords:
            lines.append("vt %.9g %.9g" % (t[0], t[1]))
        for f, t in zip(mesh.faces, mesh.uv_faces):
            lines.append("f %d/%d %d/%d %d/%d"
                         % (f[0] + 1, t[0] + 1, f[1] + 1, t[1] + 1, f[2] + 1, t[2] + 1))
    else:
        for f in mesh.faces:
            lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def read_obj(path) -> Mesh:
    """Read triangles (and v/vt indexing when present) from an ASCII OBJ."""
    verts, uvs, faces, uv_faces = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                if len(parts) != 4:
                    raise InvalidInputError(f"{path}:{lineno}: only triangles supported")
                vi, ti = [], []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi.append(int(fields[0]) - 1)
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]) - 1)
                faces.append(vi)
                if ti:
                    if len(ti) != 3:
                        raise InvalidInputError(f"{path}:{lineno}: partial vt indexing")
                    uv_faces.append(ti)
    if uv_faces and len(uv_faces) != len(faces):
        raise InvalidInputError(f"{path}: some faces carry vt indices, others do not")
    has_uv = bool(uv_faces)
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int32).reshape(-1, 3),
                np.array(uvs, dtype=np.float64).reshape(-1, 2) if has_uv else None,
                np.array(uv_faces, dtype=np.int32).reshape(-1, 3) if has_uv else None)
