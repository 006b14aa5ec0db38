"""Image-measurement energy terms over named parameter blocks.

Three families share this module. Body terms (keypoints, dense pixel-vertex
correspondences, silhouette overlap, bone directions, pose/shape/temporal
regularizers) differentiate through pose, shape and the shared focal length.
Clothing terms (silhouette, garment segmentation, photometric tracking,
subspace regularizers) run with the body frozen, so posed clothing vertices
are affine in the decoded rest offsets and gradients reach only the subspace
coefficients. Wrinkle terms (normal-map gradient matching plus displacement
and Laplacian regularizers) act on per-vertex camera-ray scalars.

Every term returns (value, {block name: gradient}) and is exercised against
central finite differences; rendered terms are checked away from
hard-visibility discontinuities.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.linalg import solve_triangular

from .body import BodyParams, ParametricBody, PosedBody
from .camera import CameraIntrinsics, project
from .clothing import ClothingModel, decode_offsets, upper_wins
from .container import read_container, write_container
from .errors import BehindCameraError, InvalidInputError
from .geometry import Mesh
from .lbfgs import EnergyTerm
from .raster import (RasterConfig, _ProjectionChain, interpolate, rasterize,
                     render_normals, sample_texture, soft_silhouette)


def theta_name(i: int) -> str:
    return f"theta_{i:03d}"


def trans_name(i: int) -> str:
    return f"trans_{i:03d}"


def z_name(i: int) -> str:
    return f"z_{i:03d}"


# ---------------------------------------------------------------------------
# Scalar pieces


def robust_rho(x: float, c: float):
    """Saturating penalty x/(x+c) on a non-negative input, with derivative."""
    if c <= 0:
        raise InvalidInputError("rho scale must be positive")
    if x < 0:
        raise InvalidInputError("rho input must be non-negative")
    denom = x + c
    return x / denom, c / (denom * denom)


def iou_loss(soft: np.ndarray, target: np.ndarray):
    """1 - intersection/union between a soft mask and a binary target.

    Returns the loss and its gradient w.r.t. the soft mask. A fully empty
    pair is degenerate; it scores 0 with a warning.
    """
    soft = np.asarray(soft, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if soft.shape != tgt.shape:
        raise InvalidInputError("mask shapes differ")
    inter = float(np.sum(soft * tgt))
    union = float(np.sum(soft) + np.sum(tgt) - inter)
    if union == 0.0:
        warnings.warn("IoU of two empty masks; scoring 0")
        return 0.0, np.zeros_like(soft)
    # d(inter)/dS = tgt, d(union)/dS = 1 - tgt
    grad = -(tgt * union - inter * (1.0 - tgt)) / (union * union)
    return 1.0 - inter / union, grad


# ---------------------------------------------------------------------------
# Pose prior


class GmmPrior:
    """Gaussian mixture scoring a pose vector, stored via precision factors.

    ``chol_precisions[k]`` is the lower Cholesky factor L of the k-th
    precision matrix (so the quadratic form is ||L^T (x - mean)||^2).
    """

    def __init__(self, weights, means, chol_precisions):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.chol_precisions = np.asarray(chol_precisions, dtype=np.float64)
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.chol_precisions.shape != (k, d, d):
            raise InvalidInputError("mixture shapes inconsistent")
        if abs(self.weights.sum() - 1.0) > 1e-6 or np.any(self.weights < 0):
            raise InvalidInputError("mixture weights must be a distribution")
        diags = np.einsum("kii->ki", self.chol_precisions)
        if np.any(diags <= 0) or not np.all(np.isfinite(self.chol_precisions)):
            raise InvalidInputError("precision factors must be positive-definite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        d = self.dim
        r = x[None, :] - self.means                       # (k, d)
        m = np.einsum("kji,kj->ki", self.chol_precisions, r)  # L^T r
        quad = np.sum(m * m, axis=1)
        logdet = np.sum(np.log(np.einsum("kii->ki", self.chol_precisions)), axis=1)
        return -0.5 * d * np.log(2.0 * np.pi) + logdet - 0.5 * quad

    def logpdf(self, x: np.ndarray) -> float:
        lp = self._component_logpdfs(np.asarray(x, dtype=np.float64))
        a = np.log(self.weights) + lp
        m = a.max()
        return float(m + np.log(np.sum(np.exp(a - m))))

    def neg_log(self, x: np.ndarray):
        """(-log p(x), gradient)."""
        x = np.asarray(x, dtype=np.float64)
        lp = self._component_logpdfs(x)
        a = np.log(self.weights) + lp
        a -= a.max()
        resp = np.exp(a)
        resp /= resp.sum()
        r = x[None, :] - self.means
        m = np.einsum("kji,kj->ki", self.chol_precisions, r)   # L^T r
        lam_r = np.einsum("kij,kj->ki", self.chol_precisions, m)  # L L^T r
        grad = np.einsum("k,ki->i", resp, lam_r)
        return -self.logpdf(x), grad


def fit_gmm(samples: np.ndarray, n_components: int = 8, seed: int = 0,
            n_iters: int = 200, reg: float = 1e-6) -> GmmPrior:
    """Expectation-maximization fit with full covariances (seeded init)."""
    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if n < n_components:
        raise InvalidInputError("need at least one sample per component")
    rng = np.random.default_rng(seed)
    means = x[rng.choice(n, size=n_components, replace=False)].copy()
    base_cov = np.cov(x.T) if n > 1 else np.eye(d)
    base_cov = np.atleast_2d(base_cov) + reg * np.eye(d)
    covs = np.repeat(base_cov[None], n_components, axis=0)
    weights = np.full(n_components, 1.0 / n_components)

    prev_ll = -np.inf
    for _ in range(n_iters):
        # E-step in log space.
        log_resp = np.empty((n, n_components))
        for k in range(n_components):
            L = np.linalg.cholesky(covs[k])
            diff = x - means[k]
            sol = solve_triangular(L, diff.T, lower=True)
            quad = np.sum(sol * sol, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            log_resp[:, k] = (np.log(weights[k]) - 0.5 * (d * np.log(2 * np.pi)
                              + logdet + quad))
        m = log_resp.max(axis=1, keepdims=True)
        ll = float(np.sum(m.ravel() + np.log(np.sum(np.exp(log_resp - m), axis=1))))
        resp = np.exp(log_resp - m)
        resp /= resp.sum(axis=1, keepdims=True)
        # M-step.
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for k in range(n_components):
            diff = x - means[k]
            covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + reg * np.eye(d)
        if abs(ll - prev_ll) < 1e-9 * max(1.0, abs(ll)):
            break
        prev_ll = ll

    chol_prec = np.empty_like(covs)
    for k in range(n_components):
        chol_prec[k] = np.linalg.cholesky(np.linalg.inv(covs[k]))
    return GmmPrior(weights, means, chol_prec)


def save_gmm(path, prior: GmmPrior) -> None:
    write_container(path, "gmm_prior", {"n_components": len(prior.weights)},
                    {"weights": prior.weights, "means": prior.means,
                     "chol_precisions": prior.chol_precisions})


def load_gmm(path) -> GmmPrior:
    _, arrays = read_container(path, "gmm_prior")
    weights = arrays["weights"]
    weights = weights / weights.sum()  # absorb float32 storage rounding
    return GmmPrior(weights, arrays["means"], arrays["chol_precisions"])


# ---------------------------------------------------------------------------
# Shared per-frame state


class _FrameCache:
    def __init__(self):
        self._store = {}

    def get(self, i, key, builder):
        hit = self._store.get(i)
        if hit is not None and hit[0] == key:
            return hit[1]
        value = builder()
        self._store[i] = (key, value)
        return value


class BodyState:
    """Per-frame posed bodies rebuilt lazily from the current blocks.

    Blocks: ``beta`` (shared), ``focal`` (shared, length 1), and per frame
    ``theta_%03d`` / ``trans_%03d``. The camera has a centered principal
    point; only the focal length moves. The focal block holds the length
    relative to ``focal_ref`` so its gradient lives on the same scale as the
    other blocks (a raw pixel focal moves ~300x slower than pose under the
    same step).
    """

    def __init__(self, body: ParametricBody, width: int, height: int, n_frames: int,
                 focal_ref: float = 1.0):
        self.body = body
        self.width = width
        self.height = height
        self.n_frames = n_frames
        self.focal_ref = float(focal_ref)
        self._cache = _FrameCache()

    def camera(self, blocks) -> CameraIntrinsics:
        f = float(blocks["focal"][0]) * self.focal_ref
        return CameraIntrinsics.centered(f, self.width, self.height)

    def posed(self, i: int, blocks) -> PosedBody:
        beta = blocks["beta"]
        theta = blocks[theta_name(i)]
        trans = blocks[trans_name(i)]
        key = (beta.tobytes(), theta.tobytes(), trans.tobytes())
        return self._cache.get(
            i, key, lambda: PosedBody(self.body, BodyParams(
                beta.copy(), theta.copy(), trans.copy())))

    def vertices(self, i, blocks) -> np.ndarray:
        return self.posed(i, blocks).vertices

    def world_joints(self, i, blocks) -> np.ndarray:
        posed = self.posed(i, blocks)
        return posed.posed_joints + posed.params.translation

    def mesh(self, i, blocks) -> Mesh:
        return self.body.mesh(self.vertices(i, blocks))

    def pull(self, i, blocks, grad_vertices=None, grad_joints=None,
             grad_focal: float = 0.0) -> dict:
        posed = self.posed(i, blocks)
        g = posed.backward(grad_vertices, grad_joints)
        g_t = g["translation"]
        if grad_joints is not None:
            # world joints carry the frame translation on top of kinematics
            g_t = g_t + np.asarray(grad_joints).sum(axis=0)
        out = {"beta": g["beta"], theta_name(i): g["theta"], trans_name(i): g_t}
        if grad_focal != 0.0:
            out["focal"] = np.array([grad_focal * self.focal_ref])
        return out


class ClothState:
    """Per-frame clothed meshes with the body and camera frozen.

    The skinning maps (B, o) for each frame are precomputed once, so posed
    clothing vertices are B (rest + merged offsets) + o and the pullback to
    the subspace coefficients is a couple of matrix products. Blocks:
    ``z_%03d`` holding the stacked upper+lower coefficients.
    """

    def __init__(self, body: ParametricBody, frame_params: list,
                 upper: ClothingModel, lower: ClothingModel,
                 cam: CameraIntrinsics):
        self.body = body
        self.upper = upper
        self.lower = lower
        self.cam = cam
        self.n_z_upper = upper.n_z
        self.frames = []
        for params in frame_params:
            posed = PosedBody(body, params)
            B, o = posed.linear_maps()
            self.frames.append({"B": B, "o": o, "rest": posed.rest_vertices})
        self._cache = _FrameCache()

    def split(self, z: np.ndarray):
        return z[:self.n_z_upper], z[self.n_z_upper:]

    def clothed(self, i: int, blocks) -> dict:
        z = blocks[z_name(i)]
        key = (z.tobytes(),)

        def build():
            zu, zl = self.split(z)
            du = decode_offsets(self.upper, zu)
            dl = decode_offsets(self.lower, zl)
            win = upper_wins(du, dl)
            merged = np.where(win[:, None], du, dl)
            fr = self.frames[i]
            verts = np.einsum("nab,nb->na", fr["B"], fr["rest"] + merged) + fr["o"]
            return {"vertices": verts, "upper_offsets": du, "lower_offsets": dl,
                    "winner_upper": win}

        return self._cache.get(i, key, build)

    def vertices(self, i, blocks) -> np.ndarray:
        return self.clothed(i, blocks)["vertices"]

    def mesh(self, i, blocks) -> Mesh:
        return self.body.mesh(self.vertices(i, blocks))

    def camera(self, blocks) -> CameraIntrinsics:
        return self.cam

    def pull(self, i, blocks, grad_vertices=None, grad_upper_offsets=None,
             grad_lower_offsets=None, grad_focal: float = 0.0) -> dict:
        state = self.clothed(i, blocks)
        win = state["winner_upper"][:, None]
        gu = np.zeros((self.body.n_vertices, 3))
        gl = np.zeros((self.body.n_vertices, 3))
        if grad_vertices is not None:
            g_rest = np.einsum("nab,na->nb", self.frames[i]["B"], grad_vertices)
            gu += np.where(win, g_rest, 0.0)
            gl += np.where(win, 0.0, g_rest)
        if grad_upper_offsets is not None:
            gu += grad_upper_offsets
        if grad_lower_offsets is not None:
            gl += grad_lower_offsets
        gz = np.concatenate([self.upper.basis.T @ gu.ravel(),
                             self.lower.basis.T @ gl.ravel()])
        return {z_name(i): gz}


# ---------------------------------------------------------------------------
# Body-stage terms


class KeypointTerm(EnergyTerm):
    """Confidence-weighted squared pixel error of projected joints."""

    name = "kp2d"

    def __init__(self, state: BodyState, detections: list, weight: float = 1.0):
        # detections: per frame an (n_joints, 3) array of (x, y, confidence)
        self.state = state
        self.detections = [np.asarray(d, dtype=np.float64) for d in detections]
        self.weight = weight
        for d in self.detections:
            if d.shape != (state.body.n_joints, 3):
                raise InvalidInputError("detections must be (n_joints, 3) per frame")
        if all(np.all(d[:, 2] == 0) for d in self.detections):
            warnings.warn("all keypoint confidences are zero; term is inert")

    def evaluate(self, blocks):
        nf = len(self.detections)
        total = 0.0
        grads = {}
        try:
            cam = self.state.camera(blocks)
            for i, det in enumerate(self.detections):
                joints = self.state.world_joints(i, blocks)
                pix = project(joints, cam)
                resid = pix - det[:, :2]
                conf = det[:, 2]
                total += float(np.sum(conf * np.sum(resid * resid, axis=1)))
                grad_pix = 2.0 * conf[:, None] * resid / nf
                chain = _ProjectionChain(joints, cam)
                gj, gf = chain.pull(grad_pix)
                for k, v in self.state.pull(i, blocks, grad_joints=gj,
                                            grad_focal=gf).items():
                    grads[k] = grads.get(k, 0.0) + v
        except BehindCameraError:
            return np.inf, {}
        return total / nf, grads


class DenseCorrespondenceTerm(EnergyTerm):
    """Squared pixel error between sampled pixels and their mesh vertices."""

    name = "dp"

    def __init__(self, state: BodyState, samples: list, weight: float = 1.0):
        # samples: per frame (pixels (m, 2), vertex_ids (m,))
        self.state = state
        self.samples = []
        for pix, ids in samples:
            pix = np.asarray(pix, dtype=np.float64).reshape(-1, 2)
            ids = np.asarray(ids, dtype=np.int64).ravel()
            if len(pix) != len(ids):
                raise InvalidInputError("pixel/vertex sample lengths differ")
            if len(ids) and (ids.min() < 0 or ids.max() >= state.body.n_vertices):
                raise InvalidInputError("vertex index out of range")
            self.samples.append((pix, ids))
        self.weight = weight

    def evaluate(self, blocks):
        nf = len(self.samples)
        total = 0.0
        grads = {}
        try:
            cam = self.state.camera(blocks)
            for i, (pix_t, ids) in enumerate(self.samples):
                if len(ids) == 0:
                    continue
                verts = self.state.vertices(i, blocks)[ids]
                pix = project(verts, cam)
                resid = pix - pix_t
                total += float(np.sum(resid * resid))
                chain = _ProjectionChain(verts, cam)
                gsel, gf = chain.pull(2.0 * resid / nf)
                gv = np.zeros((self.state.body.n_vertices, 3))
                np.add.at(gv, ids, gsel)
                for k, v in self.state.pull(i, blocks, grad_vertices=gv,
                                            grad_focal=gf).items():
                    grads[k] = grads.get(k, 0.0) + v
        except BehindCameraError:
            return np.inf, {}
        return total / nf, grads


class SilhouetteTerm(EnergyTerm):
    """Soft-rendered silhouette against a binary target, scored by IoU loss.

    Works over either state kind; gradients reach whatever blocks the state
    exposes (body pose and focal, or clothing coefficients).
    """

    def __init__(self, state, targets: list, config: RasterConfig,
                 weight: float = 1.0, name: str = "bsil",
                 camera_scale: float = 1.0):
        # camera_scale < 1 renders the comparison at reduced resolution; the
        # targets must already be downsampled to match.
        self.state = state
        self.targets = [np.asarray(t, dtype=np.float64) for t in targets]
        self.config = config
        self.weight = weight
        self.name = name
        self.camera_scale = camera_scale

    def evaluate(self, blocks):
        nf = len(self.targets)
        total = 0.0
        grads = {}
        try:
            cam = self.state.camera(blocks)
            if self.camera_scale != 1.0:
                cam = cam.scaled(self.camera_scale)
            faces = self.state.body.faces
            for i, target in enumerate(self.targets):
                verts = self.state.vertices(i, blocks)
                pix = project(verts, cam)
                img, ctx = soft_silhouette(pix, faces, cam.width, cam.height,
                                           self.config, cam.ndc_scale())
                value, grad_img = iou_loss(img, target)
                total += value
                grad_pix = ctx.backward(grad_img / nf)
                chain = _ProjectionChain(verts, cam)
                gv, gf = chain.pull(grad_pix)
                for k, v in self.state.pull(i, blocks, grad_vertices=gv,
                                            grad_focal=gf * self.camera_scale).items():
                    grads[k] = grads.get(k, 0.0) + v
        except BehindCameraError:
            return np.inf, {}
        return total / nf, grads


class BoneDirectionTerm(EnergyTerm):
    """Squared error between posed unit bone directions and target vectors."""

    name = "pof"

    def __init__(self, state: BodyState, targets: list, weight: float = 1.0):
        # targets: per frame (parents (m,), children (m,), unit dirs (m, 3))
        self.state = state
        self.targets = []
        for par, chi, dirs in targets:
            par = np.asarray(par, dtype=np.int64).ravel()
            chi = np.asarray(chi, dtype=np.int64).ravel()
            dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
            if not (len(par) == len(chi) == len(dirs)):
                raise InvalidInputError("bone target lengths differ")
            norms = np.linalg.norm(dirs, axis=1)
            if len(dirs) and np.any(np.abs(norms - 1.0) > 1e-3):
                raise InvalidInputError("bone direction targets must be unit vectors")
            self.targets.append((par, chi, dirs))
        self.weight = weight

    def evaluate(self, blocks):
        nf = len(self.targets)
        total = 0.0
        grads = {}
        for i, (par, chi, dirs) in enumerate(self.targets):
            if len(par) == 0:
                continue
            joints = self.state.world_joints(i, blocks)
            bone = joints[chi] - joints[par]
            norm = np.linalg.norm(bone, axis=1)
            ok = norm > 1e-12
            if not np.all(ok):
                warnings.warn("zero-length bone skipped in direction term")
            unit = np.zeros_like(bone)
            unit[ok] = bone[ok] / norm[ok, None]
            resid = unit - dirs
            total += float(np.sum(resid[ok] * resid[ok]))
            # d unit / d bone = (I - u u^T) / |bone|
            g_unit = 2.0 * resid / nf
            g_bone = np.zeros_like(bone)
            g_bone[ok] = (g_unit[ok] - unit[ok] * np.sum(unit[ok] * g_unit[ok],
                                                         axis=1)[:, None]) / norm[ok, None]
            gj = np.zeros((self.state.body.n_joints, 3))
            np.add.at(gj, chi, g_bone)
            np.add.at(gj, par, -g_bone)
            for k, v in self.state.pull(i, blocks, grad_joints=gj).items():
                grads[k] = grads.get(k, 0.0) + v
        return total / nf, grads


class PosePriorTerm(EnergyTerm):
    """Negative log-likelihood of each frame's pose under a Gaussian mixture."""

    name = "gmm"

    def __init__(self, prior: GmmPrior, n_frames: int, weight: float = 1.0):
        self.prior = prior
        self.n_frames = n_frames
        self.weight = weight

    def evaluate(self, blocks):
        total = 0.0
        grads = {}
        for i in range(self.n_frames):
            theta = blocks[theta_name(i)]
            if len(theta) != self.prior.dim:
                raise InvalidInputError("pose prior dimension mismatch")
            value, grad = self.prior.neg_log(theta)
            total += value
            grads[theta_name(i)] = grad / self.n_frames
        return total / self.n_frames, grads


class ShapeL2Term(EnergyTerm):
    """Squared norm of the shape coefficients."""

    name = "beta"

    def __init__(self, weight: float = 1.0):
        self.weight = weight

    def evaluate(self, blocks):
        beta = blocks["beta"]
        return float(beta @ beta), {"beta": 2.0 * beta}


class BodyTemporalTerm(EnergyTerm):
    """Squared differences of consecutive poses and translations."""

    name = "temp_body"

    def __init__(self, n_frames: int, weight: float = 1.0):
        self.n_frames = n_frames
        self.weight = weight

    def evaluate(self, blocks):
        total = 0.0
        grads = {}
        for i in range(self.n_frames - 1):
            for namer in (theta_name, trans_name):
                d = blocks[namer(i + 1)] - blocks[namer(i)]
                total += float(d @ d)
                grads[namer(i + 1)] = grads.get(namer(i + 1), 0.0) + 2.0 * d
                grads[namer(i)] = grads.get(namer(i), 0.0) - 2.0 * d
        return total, grads


# ---------------------------------------------------------------------------
# Clothing-stage terms


class GarmentSegTerm(EnergyTerm):
    """Penalizes rendered garment offsets that land outside that garment's mask.

    Renders each garment's per-vertex offset field on the clothed mesh and
    integrates its squared magnitude over the mask complement. Gradients flow
    both through the rendered attribute values and through the mesh geometry.
    """

    name = "cseg"

    def __init__(self, state: ClothState, masks: list, config: RasterConfig,
                 weight: float = 1.0):
        # masks: per frame dict {"upper": (H, W) binary, "lower": ...}; a
        # missing key skips that garment for the frame.
        self.state = state
        self.masks = masks
        self.config = config
        self.weight = weight

    def evaluate(self, blocks):
        nf = len(self.masks)
        total = 0.0
        grads = {}
        cam = self.state.camera(blocks)
        faces = self.state.body.faces
        for i, frame_masks in enumerate(self.masks):
            if not frame_masks:
                continue
            st = self.state.clothed(i, blocks)
            verts = st["vertices"]
            try:
                pix = project(verts, cam)
            except BehindCameraError:
                return np.inf, {}
            frag = rasterize(pix, verts[:, 2], faces, cam.width, cam.height,
                             self.config)
            gv_total = np.zeros_like(verts)
            g_off = {"upper": None, "lower": None}
            for key in ("upper", "lower"):
                if key not in frame_masks:
                    continue
                outside = 1.0 - np.asarray(frame_masks[key], dtype=np.float64)
                offsets = st[f"{key}_offsets"]
                img, ctx = interpolate(frag, offsets, 0.0)
                total += float(np.sum(outside * np.sum(img * img, axis=2)))
                grad_img = (2.0 / nf) * outside[:, :, None] * img
                grad_pix, grad_attrs = ctx.backward(grad_img)
                chain = _ProjectionChain(verts, cam)
                gv, _ = chain.pull(grad_pix)
                gv_total += gv
                g_off[key] = grad_attrs
            pulled = self.state.pull(i, blocks, grad_vertices=gv_total,
                                     grad_upper_offsets=g_off["upper"],
                                     grad_lower_offsets=g_off["lower"])
            for k, v in pulled.items():
                grads[k] = grads.get(k, 0.0) + v
        return total / nf, grads


class PhotoTerm(EnergyTerm):
    """Squared RGB error of the textured render, gated by rendered validity.

    Both the color render and the validity render move with the mesh, so the
    pullback applies the product rule across the two texture lookups. With an
    all-invalid texture the term is exactly zero.
    """

    name = "photo"

    def __init__(self, state: ClothState, images: list, texture: np.ndarray,
                 validity: np.ndarray, config: RasterConfig, weight: float = 1.0):
        self.state = state
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        self.texture = np.asarray(texture, dtype=np.float64)
        self.validity = np.asarray(validity, dtype=np.float64)
        if self.texture.shape[:2] != self.validity.shape[:2]:
            raise InvalidInputError("texture and validity sizes differ")
        self.config = config
        self.weight = weight
        if self.state.body.uv_coords is None:
            raise InvalidInputError("photometric term needs a UV atlas")

    def evaluate(self, blocks):
        nf = len(self.images)
        total = 0.0
        grads = {}
        cam = self.state.camera(blocks)
        body = self.state.body
        for i, image in enumerate(self.images):
            verts = self.state.vertices(i, blocks)
            try:
                pix = project(verts, cam)
            except BehindCameraError:
                return np.inf, {}
            frag = rasterize(pix, verts[:, 2], body.faces, cam.width, cam.height,
                             self.config)
            rgb, ctx_rgb = sample_texture(frag, body.uv_coords, body.uv_faces,
                                          self.texture, 0.0)
            val, ctx_val = sample_texture(frag, body.uv_coords, body.uv_faces,
                                          self.validity[:, :, None], 0.0)
            w = val[:, :, 0]
            resid = rgb - image
            err = np.sum(resid * resid, axis=2)
            total += float(np.sum(err * w))
            g_rgb = (2.0 / nf) * w[:, :, None] * resid
            g_w = err[:, :, None] / nf
            gp1, _ = ctx_rgb.backward(g_rgb)
            gp2, _ = ctx_val.backward(g_w)
            chain = _ProjectionChain(verts, cam)
            gv, _ = chain.pull(gp1 + gp2)
            for k, v in self.state.pull(i, blocks, grad_vertices=gv).items():
                grads[k] = grads.get(k, 0.0) + v
        return total / nf, grads


class SubspaceBoundTerm(EnergyTerm):
    """Saturating penalty on the squared norm of each frame's coefficients."""

    name = "creg"

    def __init__(self, n_frames: int, scale: float, weight: float = 1.0):
        if scale <= 0:
            raise InvalidInputError("regularizer scale must be positive")
        self.n_frames = n_frames
        self.scale = scale
        self.weight = weight

    def evaluate(self, blocks):
        total = 0.0
        grads = {}
        for i in range(self.n_frames):
            z = blocks[z_name(i)]
            value, slope = robust_rho(float(z @ z), self.scale)
            total += value
            grads[z_name(i)] = (2.0 * slope / self.n_frames) * z
        return total / self.n_frames, grads


class ClothTemporalTerm(EnergyTerm):
    """Mean squared change of the coefficients between consecutive frames."""

    name = "ctemp"

    def __init__(self, n_frames: int, weight: float = 1.0):
        self.n_frames = n_frames
        self.weight = weight
        if n_frames < 2:
            warnings.warn("temporal clothing term needs at least two frames")

    def evaluate(self, blocks):
        if self.n_frames < 2:
            return 0.0, {}
        scale = 1.0 / (self.n_frames - 1)
        total = 0.0
        grads = {}
        for i in range(self.n_frames - 1):
            d = blocks[z_name(i + 1)] - blocks[z_name(i)]
            total += scale * float(d @ d)
            grads[z_name(i + 1)] = grads.get(z_name(i + 1), 0.0) + 2.0 * scale * d
            grads[z_name(i)] = grads.get(z_name(i), 0.0) - 2.0 * scale * d
        return total, grads


# ---------------------------------------------------------------------------
# Wrinkle-stage terms (single frame; block "delta")


def _masked_forward_diffs(image: np.ndarray, mask: np.ndarray):
    """Forward differences along x and y where both pixels are inside the mask."""
    vx = mask[:, 1:] & mask[:, :-1]
    vy = mask[1:, :] & mask[:-1, :]
    dx = image[:, 1:] - image[:, :-1]
    dy = image[1:, :] - image[:-1, :]
    return dx, dy, vx, vy


class NormalGradientTerm(EnergyTerm):
    """Matches rendered normals to a target normal map in the gradient domain.

    Vertices move along fixed unit camera rays by the per-vertex ``delta``
    block; forward differences are compared only where both pixels of the
    stencil lie inside the clothing mask.
    """

    name = "normal"

    def __init__(self, base_vertices: np.ndarray, faces: np.ndarray,
                 rays: np.ndarray, cam: CameraIntrinsics, target: np.ndarray,
                 mask: np.ndarray, config: RasterConfig, weight: float = 1.0):
        self.base = np.asarray(base_vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int32)
        self.rays = np.asarray(rays, dtype=np.float64)
        norms = np.linalg.norm(self.rays, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InvalidInputError("camera rays must be unit vectors")
        self.cam = cam
        self.target = np.asarray(target, dtype=np.float64)
        self.mask = np.asarray(mask).astype(bool)
        self.config = config
        self.weight = weight
        self._tdx, self._tdy, self._vx, self._vy = _masked_forward_diffs(
            self.target, self.mask)

    def displaced(self, delta: np.ndarray) -> np.ndarray:
        return self.base + self.rays * delta[:, None]

    def evaluate(self, blocks):
        delta = blocks["delta"]
        verts = self.displaced(delta)
        try:
            render = render_normals(Mesh(verts, self.faces), self.cam, self.config)
        except BehindCameraError:
            return np.inf, {}
        dx, dy, _, _ = _masked_forward_diffs(render.image, self.mask)
        rx = np.where(self._vx[:, :, None], dx - self._tdx, 0.0)
        ry = np.where(self._vy[:, :, None], dy - self._tdy, 0.0)
        value = float(np.sum(rx * rx) + np.sum(ry * ry))
        g_img = np.zeros_like(render.image)
        g_img[:, 1:] += 2.0 * rx
        g_img[:, :-1] -= 2.0 * rx
        g_img[1:, :] += 2.0 * ry
        g_img[:-1, :] -= 2.0 * ry
        gv, _ = render.backward(g_img)
        return value, {"delta": np.sum(gv * self.rays, axis=1)}


class DisplacementL2Term(EnergyTerm):
    """Squared norm of the ray displacements (rays are unit length)."""

    name = "wreg"

    def __init__(self, weight: float = 1.0):
        self.weight = weight

    def evaluate(self, blocks):
        delta = blocks["delta"]
        return float(delta @ delta), {"delta": 2.0 * delta}


class LaplacianSmoothnessTerm(EnergyTerm):
    """Squared norm of the mesh Laplacian applied to the displaced vertices."""

    name = "wlpl"

    def __init__(self, base_vertices: np.ndarray, rays: np.ndarray,
                 laplacian, weight: float = 1.0):
        self.base = np.asarray(base_vertices, dtype=np.float64)
        self.rays = np.asarray(rays, dtype=np.float64)
        self.laplacian = laplacian.tocsr()
        self.weight = weight

    def evaluate(self, blocks):
        delta = blocks["delta"]
        verts = self.base + self.rays * delta[:, None]
        lv = self.laplacian @ verts
        gv = 2.0 * (self.laplacian.T @ lv)
        return float(np.sum(lv * lv)), {"delta": np.sum(gv * self.rays, axis=1)}
