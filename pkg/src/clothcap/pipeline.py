"""Capture stages over a measurement sequence.

Four stages run in order: a joint body fit over all frames, sequential
per-frame clothing tracking that grows a UV texture as new surface becomes
visible, a batch refinement of all clothing coefficients with a temporal
smoothness term, and per-frame wrinkle extraction against a normal map.

Body and camera parameters are frozen bit-exactly after the body stage; the
texture is frozen after the sequential stage. Each stage writes a checkpoint
directory (params JSON, trace CSVs, per-frame OBJ meshes) and ``run_pipeline``
resumes from whatever checkpoints already exist.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .body import BodyParams, ParametricBody, PosedBody
from .camera import CameraIntrinsics, backproject_pixel
from .clothing import ClothingModel, decode_offsets, merge_offsets
from .config import raster_config, resolve, silhouette_raster, solver_config
from .energy import (BodyState, BodyTemporalTerm, BoneDirectionTerm,
                     ClothState, ClothTemporalTerm, DenseCorrespondenceTerm,
                     DisplacementL2Term, GarmentSegTerm, KeypointTerm,
                     LaplacianSmoothnessTerm, NormalGradientTerm, PhotoTerm,
                     PosePriorTerm, ShapeL2Term, SilhouetteTerm,
                     SubspaceBoundTerm, theta_name, trans_name, z_name)
from .errors import InvalidInputError, StageError, UnfittableSequenceError
from .geometry import Mesh, loop_subdivide, uniform_laplacian, write_obj
from .images import bool_to_mask, write_pgm, write_ppm
from .lbfgs import ParamBlock, lbfgs_minimize, write_trace_csv
from .raster import visible_texels

CONF_MIN = 0.2  # keypoints below this confidence do not anchor anything


# ---------------------------------------------------------------------------
# State containers


@dataclass
class GrowingTexture:
    """UV texture plus a validity mask of texels filled so far."""

    rgb: np.ndarray    # (S, S, 3) float in [0, 1]
    valid: np.ndarray  # (S, S) bool

    @classmethod
    def empty(cls, size: int) -> "GrowingTexture":
        return cls(np.zeros((size, size, 3)), np.zeros((size, size), dtype=bool))

    def copy(self) -> "GrowingTexture":
        return GrowingTexture(self.rgb.copy(), self.valid.copy())


@dataclass
class CaptureState:
    """Everything a full run produces; later-stage fields stay None until set."""

    body: ParametricBody
    beta: np.ndarray | None = None
    focal: float | None = None
    thetas: np.ndarray | None = None        # (F, 3 n_joints)
    translations: np.ndarray | None = None  # (F, 3)
    z_upper: np.ndarray | None = None       # (F, n_z_upper)
    z_lower: np.ndarray | None = None
    texture: GrowingTexture | None = None
    body_meshes: list | None = None
    clothed_meshes: list | None = None
    wrinkled_meshes: list | None = None
    stage_energies: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return 0 if self.thetas is None else len(self.thetas)

    def frame_params(self, i: int) -> BodyParams:
        return BodyParams(self.beta, self.thetas[i], self.translations[i])


# ---------------------------------------------------------------------------
# Shared helpers


def downsample_mask(mask: np.ndarray, scale: float) -> np.ndarray:
    """Block-average a mask to ``scale`` resolution (1/scale must be integer)."""
    if scale == 1.0:
        return np.asarray(mask, dtype=np.float64)
    factor = int(round(1.0 / scale))
    if abs(factor * scale - 1.0) > 1e-9:
        raise InvalidInputError(f"scale {scale} is not an integer reciprocal")
    h, w = mask.shape
    if h % factor or w % factor:
        raise InvalidInputError(f"resolution {w}x{h} not divisible by {factor}")
    m = np.asarray(mask, dtype=np.float64)
    return m.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def sample_image_bilinear(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear color lookup at continuous pixel coordinates (centers +0.5)."""
    h, w = image.shape[:2]
    u = np.clip(xy[:, 0] - 0.5, 0.0, w - 1.0)
    v = np.clip(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), w - 2) if w > 1 else np.zeros(len(u), np.int64)
    y0 = np.minimum(np.floor(v).astype(np.int64), h - 2) if h > 1 else np.zeros(len(v), np.int64)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return ((1 - fx) * (1 - fy) * image[y0, x0] + fx * (1 - fy) * image[y0, x1]
            + (1 - fx) * fy * image[y1, x0] + fx * fy * image[y1, x1])


def _keypoint_bbox_init(keypoints: np.ndarray, body: ParametricBody,
                        cam: CameraIntrinsics) -> np.ndarray:
    """Rough frame translation from the confident-keypoint bounding box."""
    conf = keypoints[:, 2] > CONF_MIN
    pts = keypoints[conf, :2]
    joints_rest = body.joint_regressor @ body.template_vertices
    extent_m = float(np.max(joints_rest.max(axis=0) - joints_rest.min(axis=0)))
    extent_px = float(np.max(pts.max(axis=0) - pts.min(axis=0)))
    if extent_px < 1.0:
        extent_px = 1.0
    depth = cam.fx * extent_m / extent_px
    cx, cy = pts.mean(axis=0)
    center = backproject_pixel(cx, cy, depth, cam)
    return center - joints_rest.mean(axis=0)


def _sil_targets(seq, scale: float) -> list:
    return [downsample_mask(f.silhouette, scale) for f in seq.frames]


def _seg_masks(seq, scale: float) -> list:
    masks = []
    for f in seq.frames:
        d = {}
        if f.seg_upper is not None:
            d["upper"] = downsample_mask(f.seg_upper, scale)
        if f.seg_lower is not None:
            d["lower"] = downsample_mask(f.seg_lower, scale)
        masks.append(d)
    return masks


# ---------------------------------------------------------------------------
# Stage 1: body fit


@dataclass
class BodyFit:
    beta: np.ndarray
    focal: float
    thetas: np.ndarray
    translations: np.ndarray
    result: object  # SolveResult of the main solve


def fit_body(seq, body: ParametricBody, cfg: dict | None = None,
             prior=None) -> BodyFit:
    """Joint solve for shape, focal length and per-frame pose/translation.

    A warmup pass without the silhouette term pulls the skeleton roughly into
    place from keypoints alone; the full energy then refines everything.
    """
    cfg = cfg or resolve()
    nf = len(seq.frames)
    anchored = [i for i, f in enumerate(seq.frames)
                if int(np.sum(f.keypoints2d[:, 2] > CONF_MIN)) >= 4]
    if not anchored:
        raise UnfittableSequenceError(
            "no frame has 4 confident keypoints; cannot anchor the body fit")

    focal0 = 1.2 * max(seq.width, seq.height)
    cam0 = CameraIntrinsics.centered(focal0, seq.width, seq.height)
    # The focal block is kept relative to its initialization (see BodyState).
    blocks = [
        ParamBlock("beta", np.zeros(body.n_shape)),
        ParamBlock("focal", np.array([1.0]), lower=0.2, upper=5.0),
    ]
    fallback_t = None
    for i, f in enumerate(seq.frames):
        blocks.append(ParamBlock(theta_name(i), np.zeros(3 * body.n_joints)))
        if i in anchored:
            t0 = _keypoint_bbox_init(f.keypoints2d, body, cam0)
            fallback_t = t0
        else:
            t0 = fallback_t if fallback_t is not None else None
        if t0 is None:  # leading frames before the first anchored one
            t0 = _keypoint_bbox_init(seq.frames[anchored[0]].keypoints2d, body, cam0)
        blocks.append(ParamBlock(trans_name(i), t0.copy()))

    state = BodyState(body, seq.width, seq.height, nf, focal_ref=focal0)
    w = cfg["weights"]
    raster = raster_config(cfg)
    terms = [KeypointTerm(state, [f.keypoints2d for f in seq.frames],
                          weight=w["kp2d"])]
    empty_dp = (np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    if any(f.densepose_samples is not None for f in seq.frames):
        terms.append(DenseCorrespondenceTerm(
            state, [f.densepose_samples or empty_dp for f in seq.frames],
            weight=w["dp"]))
    empty_pof = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                 np.zeros((0, 3)))
    if any(f.pof_targets is not None for f in seq.frames):
        terms.append(BoneDirectionTerm(
            state, [f.pof_targets or empty_pof for f in seq.frames],
            weight=w["pof"]))
    if prior is not None:
        terms.append(PosePriorTerm(prior, nf, weight=w["gmm"]))
    terms.append(ShapeL2Term(weight=w["beta"]))
    if nf > 1:
        terms.append(BodyTemporalTerm(nf, weight=w["temp_body"]))

    warm = lbfgs_minimize(terms, blocks, solver_config(cfg, "body_warmup"))
    for b in blocks:
        b.values = warm.blocks[b.name].copy()

    scale = cfg["silhouette_scale"]["body"]
    sil = SilhouetteTerm(state, _sil_targets(seq, scale),
                         silhouette_raster(cfg, "body"),
                         weight=w["bsil"], name="bsil", camera_scale=scale)
    result = lbfgs_minimize(terms + [sil], blocks, solver_config(cfg, "body"))

    thetas = np.stack([result.blocks[theta_name(i)] for i in range(nf)])
    trans = np.stack([result.blocks[trans_name(i)] for i in range(nf)])
    return BodyFit(beta=result.blocks["beta"].copy(),
                   focal=float(result.blocks["focal"][0]) * focal0,
                   thetas=thetas, translations=trans, result=result)


# ---------------------------------------------------------------------------
# Stage 2: sequential tracking with texture growing


def grow_texture(texture: GrowingTexture, image: np.ndarray, mesh: Mesh,
                 cam: CameraIntrinsics, cfg: dict | None = None) -> GrowingTexture:
    """Fill currently-invalid texels that the mesh makes visible this frame.

    Valid texels are never touched, so the texture only accumulates; the
    validity mask is monotone non-decreasing over any sequence of calls.
    """
    cfg = cfg or resolve()
    if mesh.uv_coords is None:
        raise InvalidInputError("texture growing needs a UV-mapped mesh")
    size = texture.valid.shape
    visible, src = visible_texels(mesh, cam, size[0], size[1],
                                  raster_config(cfg),
                                  cos_threshold=cfg["texture"]["cos_threshold"])
    new = visible & ~texture.valid
    out = texture.copy()
    if new.any():
        out.rgb[new] = sample_image_bilinear(image, src[new])
        out.valid[new] = True
    return out


@dataclass
class TrackResult:
    z_upper: np.ndarray
    z_lower: np.ndarray
    texture: GrowingTexture
    results: list  # per-frame SolveResult


def _frame_cloth_terms(state_full, state_half, frame, idx, texture, scale,
                       w, raster, sil_raster, n_z):
    """Clothing energy for one frame; ``idx`` is the frame's index in the state."""
    terms = [SilhouetteTerm(state_half,
                            [downsample_mask(frame.silhouette, scale)],
                            sil_raster, weight=w["csil"], name="csil")]
    masks = _seg_masks_one(frame, scale)
    if masks:
        terms.append(GarmentSegTerm(state_half, [masks], raster,
                                    weight=w["cseg"]))
    else:
        warnings.warn(f"frame {idx}: no segmentation masks, tracking without them")
    terms.append(PhotoTerm(state_full, [frame.image], texture.rgb,
                           texture.valid.astype(np.float64), raster,
                           weight=w["photo"]))
    terms.append(SubspaceBoundTerm(1, scale=float(n_z), weight=w["creg"]))
    return terms


def _seg_masks_one(frame, scale: float) -> dict:
    d = {}
    if frame.seg_upper is not None:
        d["upper"] = downsample_mask(frame.seg_upper, scale)
    if frame.seg_lower is not None:
        d["lower"] = downsample_mask(frame.seg_lower, scale)
    return d


def track_clothing_sequential(seq, body: ParametricBody, fit: BodyFit,
                              upper: ClothingModel, lower: ClothingModel,
                              cfg: dict | None = None,
                              texture: GrowingTexture | None = None) -> TrackResult:
    """Per-frame clothing solves in order, each warm-started from the last.

    The first frame starts from zero coefficients and an empty texture, so
    its photometric term is identically zero; after every frame the texture
    grows from that frame's image before the next frame is solved.
    """
    cfg = cfg or resolve()
    nf = len(seq.frames)
    cam = CameraIntrinsics.centered(fit.focal, seq.width, seq.height)
    scale = cfg["silhouette_scale"]["track"]
    cam_half = cam.scaled(scale)
    w = cfg["weights"]
    raster = raster_config(cfg)
    n_z = upper.n_z + lower.n_z
    zb = cfg["clothing"]["z_bound"]
    if texture is None:
        texture = GrowingTexture.empty(cfg["texture"]["size"])

    zs = np.zeros((nf, n_z))
    z_prev = np.zeros(n_z)
    results = []
    for i in range(nf):
        params = [BodyParams(fit.beta, fit.thetas[i], fit.translations[i])]
        state_full = ClothState(body, params, upper, lower, cam)
        state_half = ClothState(body, params, upper, lower, cam_half)
        terms = _frame_cloth_terms(state_full, state_half, seq.frames[i], i,
                                   texture, scale, w, raster,
                                   silhouette_raster(cfg, "track"), n_z)
        res = lbfgs_minimize(terms, [ParamBlock(z_name(0), z_prev.copy(),
                                                lower=-zb, upper=zb)],
                             solver_config(cfg, "track"))
        zs[i] = res.blocks[z_name(0)]
        z_prev = zs[i].copy()
        results.append(res)

        mesh = state_full.mesh(0, {z_name(0): zs[i]})
        texture = grow_texture(texture, seq.frames[i].image, mesh, cam, cfg)

    return TrackResult(z_upper=zs[:, :upper.n_z], z_lower=zs[:, upper.n_z:],
                       texture=texture, results=results)


# ---------------------------------------------------------------------------
# Stage 3: batch refinement


def batch_refine(seq, body: ParametricBody, fit: BodyFit,
                 upper: ClothingModel, lower: ClothingModel,
                 z_init: np.ndarray, texture: GrowingTexture,
                 cfg: dict | None = None):
    """One joint solve over all frames' coefficients with temporal smoothing.

    The texture and its validity mask stay frozen at the sequential stage's
    final state. Returns (z (F, n_z), SolveResult).
    """
    cfg = cfg or resolve()
    nf = len(seq.frames)
    cam = CameraIntrinsics.centered(fit.focal, seq.width, seq.height)
    scale = cfg["silhouette_scale"]["batch"]
    w = cfg["weights"]
    raster = raster_config(cfg)
    n_z = upper.n_z + lower.n_z
    zb = cfg["clothing"]["z_bound"]
    params = [BodyParams(fit.beta, fit.thetas[i], fit.translations[i])
              for i in range(nf)]
    state_full = ClothState(body, params, upper, lower, cam)
    state_half = ClothState(body, params, upper, lower, cam.scaled(scale))

    terms = [SilhouetteTerm(state_half, _sil_targets(seq, scale),
                            silhouette_raster(cfg, "batch"),
                            weight=w["csil"], name="csil"),
             GarmentSegTerm(state_half, _seg_masks(seq, scale), raster,
                            weight=w["cseg"]),
             PhotoTerm(state_full, [f.image for f in seq.frames], texture.rgb,
                       texture.valid.astype(np.float64), raster,
                       weight=w["photo"]),
             SubspaceBoundTerm(nf, scale=float(n_z), weight=w["creg"])]
    if nf > 1:
        terms.append(ClothTemporalTerm(nf, weight=w["ctemp"]))

    blocks = [ParamBlock(z_name(i), z_init[i].copy(), lower=-zb, upper=zb)
              for i in range(nf)]
    res = lbfgs_minimize(terms, blocks, solver_config(cfg, "batch"))
    zs = np.stack([res.blocks[z_name(i)] for i in range(nf)])
    return zs, res


# ---------------------------------------------------------------------------
# Stage 4: wrinkle extraction


def extract_wrinkles(frame, clothed_mesh: Mesh, cam: CameraIntrinsics,
                     cfg: dict | None = None):
    """Displace a subdivided mesh along camera rays to match the normal map.

    Returns (mesh, SolveResult | None, status). Status is "ok", or
    "skipped_no_normal_map" when the frame lacks one (the subdivided mesh is
    returned unchanged).
    """
    cfg = cfg or resolve()
    sub = clothed_mesh
    for _ in range(cfg["wrinkles"]["subdivision_level"]):
        sub = loop_subdivide(sub)
    if frame.normal_map is None:
        return sub, None, "skipped_no_normal_map"

    norms = np.linalg.norm(sub.vertices, axis=1)
    if np.any(norms < 1e-9):
        raise InvalidInputError("mesh vertex at the camera center has no ray")
    rays = sub.vertices / norms[:, None]

    if frame.seg_upper is not None or frame.seg_lower is not None:
        mask = np.zeros_like(frame.silhouette)
        if frame.seg_upper is not None:
            mask |= frame.seg_upper
        if frame.seg_lower is not None:
            mask |= frame.seg_lower
    else:
        mask = frame.silhouette

    w = cfg["weights"]
    raster = raster_config(cfg)
    normal_term = NormalGradientTerm(sub.vertices, sub.faces, rays, cam,
                                     frame.normal_map, mask, raster,
                                     weight=w["normal"])
    terms = [normal_term, DisplacementL2Term(weight=w["wreg"]),
             LaplacianSmoothnessTerm(sub.vertices, rays, uniform_laplacian(sub),
                                     weight=w["wlpl"])]
    res = lbfgs_minimize(terms, [ParamBlock("delta", np.zeros(sub.n_vertices))],
                         solver_config(cfg, "wrinkles"))
    out = Mesh(normal_term.displaced(res.blocks["delta"]), sub.faces,
               sub.uv_coords, sub.uv_faces)
    return out, res, "ok"


# ---------------------------------------------------------------------------
# Orchestration with checkpoints


def _write_body_checkpoint(path, fit: BodyFit, body, meshes):
    os.makedirs(path, exist_ok=True)
    data = {"beta": list(fit.beta), "focal": fit.focal,
            "frames": [{"theta": list(fit.thetas[i]),
                        "translation": list(fit.translations[i])}
                       for i in range(len(fit.thetas))]}
    with open(os.path.join(path, "params.json"), "w") as fh:
        json.dump(data, fh, indent=1)
    if fit.result is not None:
        write_trace_csv(os.path.join(path, "trace.csv"), fit.result)
    for i, mesh in enumerate(meshes):
        write_obj(os.path.join(path, f"frame_{i:06d}.obj"), mesh)


def _read_body_checkpoint(path) -> BodyFit | None:
    p = os.path.join(path, "params.json")
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        data = json.load(fh)
    return BodyFit(beta=np.asarray(data["beta"], dtype=np.float64),
                   focal=float(data["focal"]),
                   thetas=np.asarray([f["theta"] for f in data["frames"]]),
                   translations=np.asarray([f["translation"] for f in data["frames"]]),
                   result=None)


def _write_texture_files(path, texture: GrowingTexture):
    rgb = np.clip(np.rint(texture.rgb * 255.0), 0, 255).astype(np.uint8)
    write_ppm(os.path.join(path, "texture.ppm"), rgb)
    write_pgm(os.path.join(path, "texture_valid.pgm"), bool_to_mask(texture.valid))
    # exact state for bit-identical resume; the PPM/PGM pair is for inspection
    np.savez(os.path.join(path, "texture_state.npz"),
             rgb=texture.rgb, valid=texture.valid)


def _write_z_checkpoint(path, zu, zl, meshes, results, texture=None):
    os.makedirs(path, exist_ok=True)
    data = {"frames": [{"z_upper": list(zu[i]), "z_lower": list(zl[i])}
                       for i in range(len(zu))]}
    with open(os.path.join(path, "params.json"), "w") as fh:
        json.dump(data, fh, indent=1)
    if isinstance(results, list):
        for i, r in enumerate(results):
            write_trace_csv(os.path.join(path, f"trace_{i:06d}.csv"), r)
    elif results is not None:
        write_trace_csv(os.path.join(path, "trace.csv"), results)
    for i, mesh in enumerate(meshes):
        write_obj(os.path.join(path, f"frame_{i:06d}.obj"), mesh)
    if texture is not None:
        _write_texture_files(path, texture)


def _read_z_checkpoint(path, with_texture=False):
    p = os.path.join(path, "params.json")
    if not os.path.exists(p):
        return None
    with open(p) as fh:
        data = json.load(fh)
    zu = np.asarray([f["z_upper"] for f in data["frames"]], dtype=np.float64)
    zl = np.asarray([f["z_lower"] for f in data["frames"]], dtype=np.float64)
    if not with_texture:
        return zu, zl
    tp = os.path.join(path, "texture_state.npz")
    if not os.path.exists(tp):
        return None
    with np.load(tp) as t:
        texture = GrowingTexture(t["rgb"], t["valid"])
    return zu, zl, texture


def _clothed_meshes(body, fit, upper, lower, zu, zl):
    meshes = []
    for i in range(len(zu)):
        du = decode_offsets(upper, zu[i])
        dl = decode_offsets(lower, zl[i])
        posed = PosedBody(body, BodyParams(fit.beta, fit.thetas[i],
                                           fit.translations[i]),
                          rest_offsets=merge_offsets(du, dl))
        meshes.append(body.mesh(posed.vertices))
    return meshes


def run_pipeline(seq, body: ParametricBody, upper: ClothingModel,
                 lower: ClothingModel, cfg: dict | None = None,
                 prior=None, out_dir=None) -> CaptureState:
    """Run all enabled stages, checkpointing each, resuming where possible.

    With ``out_dir`` set, a stage whose checkpoint already exists is loaded
    instead of recomputed, so an interrupted run picks up where it stopped.
    """
    cfg = cfg or resolve()
    stages = cfg["stages"]
    state = CaptureState(body=body)

    def ckpt(name):
        return os.path.join(out_dir, name) if out_dir else None

    # body
    if not stages["body"]:
        raise StageError("body", "the body stage cannot be disabled")
    fit = _read_body_checkpoint(ckpt("body")) if out_dir else None
    if fit is None:
        try:
            fit = fit_body(seq, body, cfg, prior=prior)
        except StageError:
            raise
        except Exception as e:
            raise StageError("body", str(e)) from e
        state.stage_energies["body"] = [fit.result.energy]
    state.beta, state.focal = fit.beta, fit.focal
    state.thetas, state.translations = fit.thetas, fit.translations
    state.body_meshes = [body.mesh(PosedBody(body, state.frame_params(i)).vertices)
                         for i in range(len(seq.frames))]
    if out_dir and fit.result is not None:
        _write_body_checkpoint(ckpt("body"), fit, body, state.body_meshes)

    cam = CameraIntrinsics.centered(fit.focal, seq.width, seq.height)

    # sequential tracking
    if not stages["track"]:
        return state
    loaded = _read_z_checkpoint(ckpt("track"), with_texture=True) if out_dir else None
    if loaded is not None:
        zu, zl, texture = loaded
        track_results = None
    else:
        try:
            tr = track_clothing_sequential(seq, body, fit, upper, lower, cfg)
        except StageError:
            raise
        except Exception as e:
            raise StageError("track", str(e)) from e
        zu, zl, texture, track_results = tr.z_upper, tr.z_lower, tr.texture, tr.results
        state.stage_energies["track"] = [r.energy for r in tr.results]
    state.z_upper, state.z_lower, state.texture = zu, zl, texture
    state.clothed_meshes = _clothed_meshes(body, fit, upper, lower, zu, zl)
    if out_dir and track_results is not None:
        _write_z_checkpoint(ckpt("track"), zu, zl, state.clothed_meshes,
                            track_results, texture=texture)

    # batch refinement
    if stages["batch"]:
        loaded = _read_z_checkpoint(ckpt("batch")) if out_dir else None
        if loaded is not None:
            zu, zl = loaded
            batch_result = None
        else:
            z_init = np.concatenate([zu, zl], axis=1)
            try:
                zs, batch_result = batch_refine(seq, body, fit, upper, lower,
                                                z_init, texture, cfg)
            except StageError:
                raise
            except Exception as e:
                raise StageError("batch", str(e)) from e
            zu, zl = zs[:, :upper.n_z], zs[:, upper.n_z:]
            state.stage_energies["batch"] = [batch_result.energy]
        state.z_upper, state.z_lower = zu, zl
        state.clothed_meshes = _clothed_meshes(body, fit, upper, lower, zu, zl)
        if out_dir and batch_result is not None:
            _write_z_checkpoint(ckpt("batch"), zu, zl, state.clothed_meshes,
                                batch_result)

    # wrinkles
    wrinkled = []
    statuses = []
    wrinkle_results = []
    if stages["wrinkles"]:
        for i, frame in enumerate(seq.frames):
            try:
                mesh, res, status = extract_wrinkles(frame,
                                                     state.clothed_meshes[i],
                                                     cam, cfg)
            except StageError:
                raise
            except Exception as e:
                raise StageError("wrinkles", f"frame {i}: {e}") from e
            wrinkled.append(mesh)
            statuses.append(status)
            wrinkle_results.append(res)
        state.stage_energies["wrinkles"] = [
            (r.energy if r is not None else float("nan")) for r in wrinkle_results]
    else:
        for mesh in state.clothed_meshes:
            sub = mesh
            for _ in range(cfg["wrinkles"]["subdivision_level"]):
                sub = loop_subdivide(sub)
            wrinkled.append(sub)
            statuses.append("disabled")
    state.wrinkled_meshes = wrinkled

    if out_dir:
        wd = ckpt("wrinkles")
        os.makedirs(wd, exist_ok=True)
        for i, mesh in enumerate(wrinkled):
            write_obj(os.path.join(wd, f"frame_{i:06d}.obj"), mesh)
        for i, r in enumerate(wrinkle_results):
            if r is not None:
                write_trace_csv(os.path.join(wd, f"trace_{i:06d}.csv"), r)
        with open(os.path.join(wd, "status.json"), "w") as fh:
            json.dump({"frames": statuses}, fh, indent=1)

    return state
