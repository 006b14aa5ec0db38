"""Differentiable rasterization, two flavors.

Silhouettes use a soft probabilistic union: every face contributes a
sigmoid of its signed squared screen distance (normalized-device units) to
each nearby pixel, and per-pixel coverage is one minus the product of the
miss probabilities. That makes coverage differentiable in the vertex
positions everywhere.

Color/attribute/normal channels use hard visibility (z-buffered nearest face
at each pixel center, ties broken toward the lower face index) with values
interpolated by screen-space barycentrics. Gradients flow through the
barycentrics and the interpolated values; occlusion changes are not
differentiated.

Low-level entry points work on projected 2-D vertices; the ``render_*``
functions take a mesh and camera and pull gradients back to 3-D vertices and
the shared focal length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import (CameraIntrinsics, focal_jacobian, project,
                     project_jacobian)
from .errors import InvalidInputError
from .geometry import Mesh, vertex_normals, vertex_normals_vjp

_LOG_CUTOFF = 18.0  # sigmoid(-18) ~ 1.5e-8: faces farther than this are ignored


@dataclass
class RasterConfig:
    sigma: float = 1e-4       # softness of the silhouette sigmoid, NDC^2 units
    depth_eps: float = 1e-7   # depths within this tie-break toward lower face id
    background: float = 0.0   # value of uncovered pixels in hard channels

    def __post_init__(self):
        if self.sigma <= 0 or self.depth_eps <= 0:
            raise InvalidInputError("sigma and depth_eps must be positive")


def _stable_sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _bbox_pairs(pix: np.ndarray, faces: np.ndarray, width: int, height: int,
                margin: float):
    """Candidate (face, pixel) pairs from per-face bounding boxes.

    Returns (face_ids, cols, rows); pixel centers sit at (col + .5, row + .5).
    """
    tri = pix[faces]  # (m, 3, 2)
    lo = tri.min(axis=1) - margin
    hi = tri.max(axis=1) + margin
    c0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width - 1).astype(np.int64)
    c1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    r0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height - 1).astype(np.int64)
    r1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(c1 - c0 + 1, 0)
    ny = np.maximum(r1 - r0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, z
    face_ids = np.repeat(np.arange(len(faces)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    fnx = nx[face_ids]
    cols = c0[face_ids] + local % fnx
    rows = r0[face_ids] + local // fnx
    return face_ids, cols, rows


# ---------------------------------------------------------------------------
# Soft silhouette


class SoftSilhouetteCtx:
    """Saved state for the silhouette backward pass."""

    def __init__(self, n_verts, shape, faces, face_ids, pixel_ids, seg_a, seg_b,
                 t, diff, q, sign, log_prod, sat, inv_sigma_ndc):
        self.n_verts = n_verts
        self.shape = shape
        self.faces = faces
        self.face_ids = face_ids
        self.pixel_ids = pixel_ids
        self.seg_a = seg_a        # vertex ids of the nearest edge per pair
        self.seg_b = seg_b
        self.t = t                # clamp parameter along the nearest edge
        self.diff = diff          # closest_point - pixel, (k, 2), pixel units
        self.q = q                # per-pair miss probability
        self.sign = sign          # +1 inside, -1 outside
        self.log_prod = log_prod  # per-pixel sum of log(q) over unsaturated pairs
        self.sat = sat            # per-pixel count of q == 0 pairs
        self.inv_sigma_ndc = inv_sigma_ndc  # scale^2 / sigma

    def backward(self, grad_image: np.ndarray) -> np.ndarray:
        """d(loss)/d(projected vertices) for d(loss)/d(image)."""
        g_img = np.asarray(grad_image, dtype=np.float64).ravel()
        live = self.q > 0.0
        live &= self.sat[self.pixel_ids] == 0
        pid = self.pixel_ids[live]
        q = self.q[live]
        # dS/dq_f = -prod_{g != f} q_g; saturated pixels have zero gradient
        # because every other factor carries a hard zero.
        ds_dq = -np.exp(self.log_prod[pid] - np.log(q))
        du = g_img[pid] * ds_dq * (-q * (1.0 - q))          # d q / d u = -q(1-q)
        dd2 = du * self.sign[live] * self.inv_sigma_ndc      # u = sign * d^2 / sigma_ndc
        # d(d^2)/d(endpoints): closest point x* = a + t (b - a), envelope rule.
        gxy = 2.0 * self.diff[live] * dd2[:, None]
        t = self.t[live][:, None]
        grad = np.zeros((self.n_verts, 2))
        for c in range(2):
            ga = np.bincount(self.seg_a[live], weights=gxy[:, c] * (1.0 - t[:, 0]),
                             minlength=self.n_verts)
            gb = np.bincount(self.seg_b[live], weights=gxy[:, c] * t[:, 0],
                             minlength=self.n_verts)
            grad[:, c] = ga + gb
        return grad


def soft_silhouette(pix: np.ndarray, faces: np.ndarray, width: int, height: int,
                    config: RasterConfig, ndc_scale: float):
    """Probabilistic coverage image from projected vertices.

    Per pixel: ``1 - prod_f (1 - sigmoid(sign_f * d_f^2 / sigma))`` with
    ``d_f`` the distance (in normalized-device units, ``ndc_scale`` pixels)
    from the pixel center to face f's boundary, positive inside.
    """
    pix = np.asarray(pix, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    margin = np.sqrt(_LOG_CUTOFF * config.sigma) / ndc_scale
    face_ids, cols, rows = _bbox_pairs(pix, faces, width, height, margin)
    p = np.stack([cols + 0.5, rows + 0.5], axis=1)

    # Cheap reject: pixels provably farther than the soft band from the face
    # carry miss probability 1 - O(cutoff) and neither shade nor get gradient.
    corners = pix[faces]  # (m, 3, 2)
    cent = corners.mean(axis=1)
    radius = np.sqrt(np.max(np.sum((corners - cent[:, None]) ** 2, axis=2), axis=1))
    dd = p - cent[face_ids]
    near = np.einsum("kd,kd->k", dd, dd) <= (margin + radius[face_ids]) ** 2
    face_ids, cols, rows, p = face_ids[near], cols[near], rows[near], p[near]
    pixel_ids = rows * width + cols

    tri = pix[faces[face_ids]]  # (k, 3, 2)
    # Inside test: consistent orientation of the three edge cross products.
    area2 = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    inside = area2 != 0.0
    best_d2 = np.full(len(face_ids), np.inf)
    best_seg = np.zeros(len(face_ids), dtype=np.int64)
    best_t = np.zeros(len(face_ids))
    best_diff = np.zeros((len(face_ids), 2))
    for k in range(3):
        a = tri[:, k]
        b = tri[:, (k + 1) % 3]
        e = b - a
        pa = p - a
        cr = e[:, 0] * pa[:, 1] - e[:, 1] * pa[:, 0]
        inside &= cr * area2 >= 0.0
        ee = np.einsum("kd,kd->k", e, e)
        t = np.clip(np.einsum("kd,kd->k", pa, e) / np.where(ee > 0, ee, 1.0), 0.0, 1.0)
        diff = a + t[:, None] * e - p
        d2 = np.einsum("kd,kd->k", diff, diff)
        better = d2 < best_d2
        best_d2[better] = d2[better]
        best_seg[better] = k
        best_t[better] = t[better]
        best_diff[better] = diff[better]

    sign = np.where(inside, 1.0, -1.0)
    inv_sigma_ndc = ndc_scale**2 / config.sigma
    u = sign * best_d2 * inv_sigma_ndc
    q = _stable_sigmoid(-u)  # miss probability, computed directly for stability

    n_pix = width * height
    sat = np.bincount(pixel_ids[q == 0.0], minlength=n_pix)
    live = q > 0.0
    log_prod = np.bincount(pixel_ids[live], weights=np.log(q[live]), minlength=n_pix)
    img = 1.0 - np.exp(log_prod)
    img[sat > 0] = 1.0
    img = img.reshape(height, width)

    fa = faces[face_ids]
    seg_a = fa[np.arange(len(fa)), best_seg]
    seg_b = fa[np.arange(len(fa)), (best_seg + 1) % 3]
    ctx = SoftSilhouetteCtx(len(pix), (height, width), faces, face_ids, pixel_ids,
                            seg_a, seg_b, best_t, best_diff, q, sign, log_prod,
                            sat, inv_sigma_ndc)
    return img, ctx


# ---------------------------------------------------------------------------
# Hard rasterization


class Fragments:
    """Per-pixel winning faces and barycentrics plus flat covered lists."""

    def __init__(self, face_map, pixel_ids, face_ids, bary, corners, pix, width, height):
        self.face_map = face_map  # (H, W) int32, -1 background
        self.pixel_ids = pixel_ids
        self.face_ids = face_ids
        self.bary = bary          # (k, 3)
        self.corners = corners    # (k, 3) vertex ids
        self.pix = pix            # projected vertices the raster was built from
        self.width = width
        self.height = height

    @property
    def coverage(self) -> np.ndarray:
        return self.face_map >= 0

    def pixel_points(self) -> np.ndarray:
        cols = self.pixel_ids % self.width
        rows = self.pixel_ids // self.width
        return np.stack([cols + 0.5, rows + 0.5], axis=1)


def rasterize(pix: np.ndarray, depth: np.ndarray, faces: np.ndarray,
              width: int, height: int, config: RasterConfig) -> Fragments:
    """Z-buffered triangle rasterization at pixel centers.

    ``depth`` is per-vertex camera z, interpolated with screen barycentrics
    (a declared approximation). Depth ties within ``depth_eps`` resolve to the
    lower face index, deterministically.
    """
    pix = np.asarray(pix, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    depth = np.asarray(depth, dtype=np.float64)
    face_ids, cols, rows = _bbox_pairs(pix, faces, width, height, 0.0)
    face_map = np.full((height, width), -1, dtype=np.int64)
    if len(face_ids) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Fragments(face_map, empty, empty, np.zeros((0, 3)),
                         np.zeros((0, 3), dtype=np.int64), pix, width, height)

    tri = pix[faces[face_ids]]
    p = np.stack([cols + 0.5, rows + 0.5], axis=1)
    t_area = 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    a0 = 0.5 * np.cross(tri[:, 1] - p, tri[:, 2] - p)
    a1 = 0.5 * np.cross(tri[:, 2] - p, tri[:, 0] - p)
    a2 = 0.5 * np.cross(tri[:, 0] - p, tri[:, 1] - p)
    nz = t_area != 0.0
    safe = np.where(nz, t_area, 1.0)
    bary = np.stack([a0, a1, a2], axis=1) / safe[:, None]
    inside = nz & (bary >= 0.0).all(axis=1)

    face_ids = face_ids[inside]
    bary = bary[inside]
    pixel_ids = (rows * width + cols)[inside]
    z = np.einsum("kc,kc->k", bary, depth[faces[face_ids]])
    qd = np.round(z / config.depth_eps)
    order = np.lexsort((face_ids, qd, pixel_ids))
    pid_sorted = pixel_ids[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pid_sorted[1:] != pid_sorted[:-1]
    win = order[first]

    pixel_ids = pixel_ids[win]
    face_ids = face_ids[win]
    bary = bary[win]
    corners = faces[face_ids]
    face_map.ravel()[pixel_ids] = face_ids
    return Fragments(face_map, pixel_ids, face_ids, bary, corners, pix, width, height)


def _perp(u: np.ndarray) -> np.ndarray:
    return np.stack([u[..., 1], -u[..., 0]], axis=-1)


def _bary_pullback(frag: Fragments, per_bary_grad: np.ndarray) -> np.ndarray:
    """Map d(loss)/d(barycentrics) (k, 3) to d(loss)/d(projected vertices)."""
    q = frag.pix[frag.corners]  # (k, 3, 2)
    p = frag.pixel_points()
    q0, q1, q2 = q[:, 0], q[:, 1], q[:, 2]
    T = 0.5 * np.cross(q1 - q0, q2 - q0)
    safe = np.where(T != 0.0, T, 1.0)[:, None]
    b = frag.bary

    dT = np.stack([_perp(q1 - q2), _perp(q2 - q0), _perp(q0 - q1)], axis=1) * 0.5  # (k, 3c, 2)
    dA = np.zeros((len(q), 3, 3, 2))  # (k, bary, corner, xy)
    dA[:, 0, 1] = 0.5 * _perp(q2 - p)
    dA[:, 0, 2] = 0.5 * _perp(p - q1)
    dA[:, 1, 0] = 0.5 * _perp(p - q2)
    dA[:, 1, 2] = 0.5 * _perp(q0 - p)
    dA[:, 2, 0] = 0.5 * _perp(q1 - p)
    dA[:, 2, 1] = 0.5 * _perp(p - q0)
    # d b_k / d q_m = (dA_km - b_k dT_m) / T
    db = (dA - b[:, :, None, None] * dT[:, None, :, :]) / safe[:, :, None, None]
    gq = np.einsum("kb,kbmd->kmd", per_bary_grad, db)  # (k, corner, xy)

    grad = np.zeros_like(frag.pix)
    flat = frag.corners.ravel()
    gq = gq.reshape(-1, 2)
    for c in range(2):
        grad[:, c] += np.bincount(flat, weights=gq[:, c], minlength=len(grad))
    return grad


class InterpolateCtx:
    def __init__(self, frag: Fragments, attrs: np.ndarray):
        self.frag = frag
        self.attrs = attrs

    def backward(self, grad_image: np.ndarray):
        """Returns (grad_projected_vertices, grad_attributes)."""
        frag = self.frag
        g = np.asarray(grad_image, dtype=np.float64)
        if g.ndim == 2:
            g = g[:, :, None]
        gf = g.reshape(-1, g.shape[-1])[frag.pixel_ids]  # (k, d)
        av = self.attrs[frag.corners]  # (k, 3, d)
        per_bary = np.einsum("kd,kcd->kc", gf, av)
        grad_pix = _bary_pullback(frag, per_bary)
        grad_attrs = np.zeros_like(self.attrs, dtype=np.float64)
        w = frag.bary[:, :, None] * gf[:, None, :]  # (k, 3, d)
        flat = frag.corners.ravel()
        wf = w.reshape(-1, w.shape[-1])
        for d in range(wf.shape[1]):
            grad_attrs[:, d] += np.bincount(flat, weights=wf[:, d],
                                            minlength=len(grad_attrs))
        return grad_pix, grad_attrs


def interpolate(frag: Fragments, attrs: np.ndarray, background: float = 0.0):
    """Barycentric interpolation of per-vertex attributes over the raster."""
    attrs = np.asarray(attrs, dtype=np.float64)
    squeeze = attrs.ndim == 1
    if squeeze:
        attrs = attrs[:, None]
    vals = np.einsum("kc,kcd->kd", frag.bary, attrs[frag.corners])
    img = np.full((frag.height * frag.width, attrs.shape[1]), float(background))
    img[frag.pixel_ids] = vals
    img = img.reshape(frag.height, frag.width, attrs.shape[1])
    ctx = InterpolateCtx(frag, attrs)
    return (img[:, :, 0] if squeeze else img), ctx


# ---------------------------------------------------------------------------
# Texture sampling


def _bilinear_setup(tx, ty, h, w):
    x0f = np.floor(tx)
    y0f = np.floor(ty)
    wx = tx - x0f
    wy = ty - y0f
    x0 = np.clip(x0f, 0, w - 1).astype(np.int64)
    x1 = np.clip(x0f + 1, 0, w - 1).astype(np.int64)
    y0 = np.clip(y0f, 0, h - 1).astype(np.int64)
    y1 = np.clip(y0f + 1, 0, h - 1).astype(np.int64)
    return x0, x1, y0, y1, wx, wy


def sample_bilinear(image: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    """Bilinear sample at continuous (x, y) in pixel-center coordinates."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w = image.shape[:2]
    x0, x1, y0, y1, wx, wy = _bilinear_setup(np.asarray(tx) - 0.5, np.asarray(ty) - 0.5, h, w)
    wx, wy = wx[:, None], wy[:, None]
    val = ((1 - wy) * ((1 - wx) * image[y0, x0] + wx * image[y0, x1])
           + wy * ((1 - wx) * image[y1, x0] + wx * image[y1, x1]))
    return val[:, 0] if squeeze else val


class TextureCtx:
    def __init__(self, frag, texture, uv_attrs, tx, ty):
        self.frag = frag
        self.texture = texture
        self.uv_attrs = uv_attrs  # (k, 3, 2): uv coords of the winning corners
        self.tx = tx
        self.ty = ty

    def backward(self, grad_image: np.ndarray):
        """Returns (grad_projected_vertices, grad_texels)."""
        frag = self.frag
        tex = self.texture
        h, w, d = tex.shape
        g = np.asarray(grad_image, dtype=np.float64).reshape(-1, d)[frag.pixel_ids]
        x0, x1, y0, y1, wx, wy = _bilinear_setup(self.tx - 0.5, self.ty - 0.5, h, w)

        grad_tex = np.zeros_like(tex)
        flat = grad_tex.reshape(-1, d)
        for (yy, xx, ww) in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                             (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
            ids = yy * w + xx
            contrib = ww[:, None] * g
            for c in range(d):
                flat[:, c] += np.bincount(ids, weights=contrib[:, c], minlength=h * w)

        # d value / d (tx, ty), zero where the stencil clamps to one texel.
        dvx = ((1 - wy)[:, None] * (tex[y0, x1] - tex[y0, x0])
               + wy[:, None] * (tex[y1, x1] - tex[y1, x0]))
        dvy = ((1 - wx)[:, None] * (tex[y1, x0] - tex[y0, x0])
               + wx[:, None] * (tex[y1, x1] - tex[y0, x1]))
        gtx = np.einsum("kd,kd->k", g, dvx)
        gty = np.einsum("kd,kd->k", g, dvy)
        # uv -> texel grid: tx = u * w, ty = (1 - v) * h
        guv = np.stack([gtx * w, -gty * h], axis=1)  # (k, 2) wrt (u, v)
        per_bary = np.einsum("kd,kcd->kc", guv, self.uv_attrs)
        grad_pix = _bary_pullback(frag, per_bary)
        return grad_pix, grad_tex


def sample_texture(frag: Fragments, uv_coords: np.ndarray, uv_faces: np.ndarray,
                   texture: np.ndarray, background: float = 0.0):
    """Texture lookup for every covered pixel; uv v runs bottom-up."""
    texture = np.asarray(texture, dtype=np.float64)
    squeeze = texture.ndim == 2
    if squeeze:
        texture = texture[:, :, None]
    h, w = texture.shape[:2]
    uv_attrs = np.asarray(uv_coords, dtype=np.float64)[np.asarray(uv_faces, dtype=np.int64)[frag.face_ids]]
    uv = np.einsum("kc,kcd->kd", frag.bary, uv_attrs)  # (k, 2)
    tx = uv[:, 0] * w
    ty = (1.0 - uv[:, 1]) * h
    vals = sample_bilinear(texture, tx, ty)
    img = np.full((frag.height * frag.width, texture.shape[2]), float(background))
    img[frag.pixel_ids] = vals
    img = img.reshape(frag.height, frag.width, texture.shape[2])
    ctx = TextureCtx(frag, texture, uv_attrs, tx, ty)
    return (img[:, :, 0] if squeeze else img), ctx

# ---------------------------------------------------------------------------
# Mesh-level rendering with pullback to 3-D vertices and the shared focal


class _ProjectionChain:
    """Composes a 2-D pixel gradient into 3-D vertex and focal gradients."""

    def __init__(self, verts: np.ndarray, cam: CameraIntrinsics):
        self.verts = verts
        self.jac = project_jacobian(verts, cam)
        self.fjac = focal_jacobian(verts)

    def pull(self, grad_pix: np.ndarray):
        grad_v = np.einsum("nkc,nk->nc", self.jac, grad_pix)
        grad_f = float(np.einsum("nk,nk->", self.fjac, grad_pix))
        return grad_v, grad_f


class SilhouetteRender:
    def __init__(self, image, ctx, chain):
        self.image = image
        self._ctx = ctx
        self._chain = chain

    def backward(self, grad_image: np.ndarray):
        """Returns (grad_vertices (n, 3), grad_focal)."""
        return self._chain.pull(self._ctx.backward(grad_image))


def render_silhouette(mesh: Mesh, cam: CameraIntrinsics, config: RasterConfig) -> SilhouetteRender:
    """Soft coverage image of the mesh; differentiable in vertices and focal."""
    pix = project(mesh.vertices, cam)
    img, ctx = soft_silhouette(pix, mesh.faces, cam.width, cam.height, config,
                               cam.ndc_scale())
    return SilhouetteRender(img, ctx, _ProjectionChain(mesh.vertices, cam))


class AttributeRender:
    def __init__(self, image, coverage, interp_ctx, chain):
        self.image = image
        self.coverage = coverage
        self._interp = interp_ctx
        self._chain = chain

    def backward(self, grad_image: np.ndarray):
        """Returns (grad_vertices, grad_attributes, grad_focal)."""
        grad_pix, grad_attrs = self._interp.backward(grad_image)
        grad_v, grad_f = self._chain.pull(grad_pix)
        return grad_v, grad_attrs, grad_f


def render_attribute(mesh: Mesh, attrs: np.ndarray, cam: CameraIntrinsics,
                     config: RasterConfig) -> AttributeRender:
    """Hard-visibility interpolation of per-vertex attributes."""
    pix = project(mesh.vertices, cam)
    frag = rasterize(pix, mesh.vertices[:, 2], mesh.faces, cam.width, cam.height, config)
    img, ctx = interpolate(frag, attrs, config.background)
    return AttributeRender(img, frag.coverage, ctx, _ProjectionChain(mesh.vertices, cam))


class TextureRender:
    def __init__(self, image, coverage, tex_ctx, chain):
        self.image = image
        self.coverage = coverage
        self._tex = tex_ctx
        self._chain = chain

    def backward(self, grad_image: np.ndarray):
        """Returns (grad_vertices, grad_texels, grad_focal)."""
        grad_pix, grad_tex = self._tex.backward(grad_image)
        grad_v, grad_f = self._chain.pull(grad_pix)
        return grad_v, grad_tex, grad_f


def render_texture(mesh: Mesh, texture: np.ndarray, cam: CameraIntrinsics,
                   config: RasterConfig) -> TextureRender:
    """Textured render through the mesh UV atlas (bilinear texel lookup)."""
    if mesh.uv_coords is None:
        raise InvalidInputError("render_texture needs a UV atlas")
    pix = project(mesh.vertices, cam)
    frag = rasterize(pix, mesh.vertices[:, 2], mesh.faces, cam.width, cam.height, config)
    img, ctx = sample_texture(frag, mesh.uv_coords, mesh.uv_faces, texture,
                              config.background)
    return TextureRender(img, frag.coverage, ctx, _ProjectionChain(mesh.vertices, cam))


class NormalsRender:
    def __init__(self, image, coverage, mesh, interp_ctx, chain, unit_scale):
        self.image = image
        self.coverage = coverage
        self._mesh = mesh
        self._interp = interp_ctx
        self._chain = chain
        self._unit = unit_scale  # (k, raw interp normals + norms) for renorm vjp

    def backward(self, grad_image: np.ndarray):
        """Returns (grad_vertices, grad_focal); includes the normal chain."""
        frag, raw, norm = self._unit
        g = np.asarray(grad_image, dtype=np.float64).reshape(-1, 3)[frag.pixel_ids]
        unit = raw / norm[:, None]
        g_raw = (g - unit * np.einsum("kd,kd->k", unit, g)[:, None]) / norm[:, None]
        g_interp = np.zeros((frag.height * frag.width, 3))
        g_interp[frag.pixel_ids] = g_raw
        grad_pix, grad_normals = self._interp.backward(
            g_interp.reshape(frag.height, frag.width, 3))
        grad_v, grad_f = self._chain.pull(grad_pix)
        grad_v = grad_v + vertex_normals_vjp(self._mesh.vertices, self._mesh.faces,
                                             grad_normals)
        return grad_v, grad_f


def render_normals(mesh: Mesh, cam: CameraIntrinsics, config: RasterConfig) -> NormalsRender:
    """Camera-space unit normal image, renormalized per pixel.

    The backward pass covers both the barycentric chain and the dependence of
    the vertex normals themselves on the vertex positions.
    """
    pix = project(mesh.vertices, cam)
    frag = rasterize(pix, mesh.vertices[:, 2], mesh.faces, cam.width, cam.height, config)
    normals = vertex_normals(mesh.vertices, mesh.faces, warn_degenerate=False)
    raw = np.einsum("kc,kcd->kd", frag.bary, normals[frag.corners])
    norm = np.linalg.norm(raw, axis=1)
    norm = np.maximum(norm, 1e-12)
    img = np.full((frag.height * frag.width, 3), float(config.background))
    img[frag.pixel_ids] = raw / norm[:, None]
    img = img.reshape(frag.height, frag.width, 3)
    _, interp_ctx = interpolate(frag, normals, config.background)
    return NormalsRender(img, frag.coverage, mesh, interp_ctx,
                         _ProjectionChain(mesh.vertices, cam), (frag, raw, norm))


def depth_map(mesh: Mesh, cam: CameraIntrinsics, config: RasterConfig):
    """(H, W) interpolated camera depth, +inf at background; plus fragments."""
    pix = project(mesh.vertices, cam)
    frag = rasterize(pix, mesh.vertices[:, 2], mesh.faces, cam.width, cam.height, config)
    z = np.einsum("kc,kc->k", frag.bary, mesh.vertices[frag.corners, 2])
    img = np.full(cam.height * cam.width, np.inf)
    img[frag.pixel_ids] = z
    return img.reshape(cam.height, cam.width), frag


def visible_texels(mesh: Mesh, cam: CameraIntrinsics, tex_height: int, tex_width: int,
                   config: RasterConfig | None = None, cos_threshold: float = 0.3,
                   depth_tol_rel: float = 0.01, depth_tol_abs: float = 1e-6):
    """Texels whose surface points face the camera and win the depth test.

    Returns ``(valid, src)``: a (th, tw) bool mask and per-texel continuous
    source pixel coordinates (x, y) for the valid ones. A texel maps to the
    surface through the UV atlas (lowest face index wins where charts
    overlap), must be front-facing with view-angle cosine >= ``cos_threshold``,
    must project inside the image, and must sit within depth tolerance of the
    rendered depth buffer.
    """
    if mesh.uv_coords is None:
        raise InvalidInputError("visible_texels needs a UV atlas")
    config = config or RasterConfig()
    zbuf, _ = depth_map(mesh, cam, config)

    # Rasterize the atlas itself: texel grid as pixels, uv charts as geometry.
    tuv = np.stack([mesh.uv_coords[:, 0] * tex_width,
                    (1.0 - mesh.uv_coords[:, 1]) * tex_height], axis=1)
    frag = rasterize(tuv, np.zeros(len(tuv)), mesh.uv_faces, tex_width, tex_height, config)

    tri3 = mesh.vertices[mesh.faces[frag.face_ids]]  # (k, 3, 3)
    points = np.einsum("kc,kcd->kd", frag.bary, tri3)
    fnorm = np.cross(tri3[:, 1] - tri3[:, 0], tri3[:, 2] - tri3[:, 0])
    fnorm /= np.maximum(np.linalg.norm(fnorm, axis=1, keepdims=True), 1e-30)
    pnorm = np.maximum(np.linalg.norm(points, axis=1), 1e-30)
    cosv = -np.einsum("kd,kd->k", fnorm, points) / pnorm

    ok = (cosv >= cos_threshold) & (points[:, 2] > 1e-6)
    px = np.full((len(points), 2), -1.0)
    if ok.any():
        px[ok] = project(points[ok], cam)
    cols = np.floor(px[:, 0]).astype(np.int64)
    rows = np.floor(px[:, 1]).astype(np.int64)
    inb = ok & (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
    zb = np.full(len(points), -np.inf)
    zb[inb] = zbuf[rows[inb], cols[inb]]
    ok = inb & (points[:, 2] <= zb + depth_tol_abs + depth_tol_rel * points[:, 2])

    valid = np.zeros(tex_height * tex_width, dtype=bool)
    valid[frag.pixel_ids[ok]] = True
    src = np.zeros((tex_height * tex_width, 2))
    src[frag.pixel_ids[ok]] = px[ok]
    return valid.reshape(tex_height, tex_width), src.reshape(tex_height, tex_width, 2)
