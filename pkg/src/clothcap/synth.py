"""Synthetic closed-loop harness: planted sequences and evaluation metrics.

Builds toy garments by inflating the test body outward along its normals,
plants smooth seeded trajectories for pose, translation and the garment
subspace coefficients, renders every per-frame measurement the pipeline
consumes (image, silhouette, garment masks, keypoints, dense samples, bone
directions, normal map), and writes the ground truth next to them. Because
the measurements come from the same renderer the pipeline differentiates,
recovery quality isolates the solver rather than the measurement stack.

Metrics follow a plant-and-recover protocol: a global similarity (scale plus
translation) fitted on the evaluated points, then point-to-surface distance
in millimeters, plus per-frame translation-aligned joint errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .body import (BodyParams, MINI_LOWER_BONES, MINI_SHIN_BONES,
                   MINI_UPPER_BONES, ParametricBody, PosedBody, save_body)
from .camera import CameraIntrinsics, project
from .clothing import (ClothingModel, ClothingParams, classify_vertices,
                       decode_offsets, merge_offsets, save_model, train_model,
                       DEFAULT_SKIN_EPSILON, LOWER, SKIN, UPPER)
from .energy import fit_gmm, save_gmm
from .errors import AlignmentError, GenerationError, InvalidInputError
from .geometry import Mesh, point_to_surface, vertex_normals
from .images import bool_to_mask, write_pfm, write_pgm, write_ppm
from .raster import RasterConfig, depth_map, rasterize, render_normals, render_texture

MM = 1000.0  # meters to millimeters

_HIP_BONES = (10, 11)


# ---------------------------------------------------------------------------
# Toy garments


def _template_joints(body: ParametricBody) -> np.ndarray:
    return body.joint_regressor @ body.template_vertices


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    t = np.clip((points - a) @ d / max(d @ d, 1e-12), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * d), axis=1)


def nearest_bone(body: ParametricBody) -> np.ndarray:
    """Per-vertex id of the closest bone, named by its child joint."""
    joints = _template_joints(body)
    verts = body.template_vertices
    best = np.full(body.n_vertices, -1)
    best_d = np.full(body.n_vertices, np.inf)
    for j in range(body.n_joints):
        par = body.parents[j]
        if par < 0:
            continue
        d = _segment_distances(verts, joints[par], joints[j])
        closer = d < best_d
        best[closer] = j
        best_d[closer] = d[closer]
    return best


def garment_vertex_masks(body: ParametricBody, lower_garment: str = "pants"):
    """(upper, lower) boolean vertex masks; both claim the hip region so the
    waist boundary is genuinely ambiguous without segmentation evidence."""
    if body.n_joints < 16:
        raise GenerationError("toy garments need the 16-joint canonical skeleton")
    bone = nearest_bone(body)
    upper_set = set(MINI_UPPER_BONES) | set(_HIP_BONES)
    lower_set = set(MINI_LOWER_BONES)
    if lower_garment == "pants":
        lower_set |= set(MINI_SHIN_BONES)
    mask_u = np.isin(bone, sorted(upper_set))
    mask_l = np.isin(bone, sorted(lower_set))
    if not mask_u.any() or not mask_l.any():
        raise GenerationError("degenerate garment region")
    return mask_u, mask_l


def make_toy_clothing_models(body: ParametricBody, seed: int = 0,
                             n_z_upper: int = 5, n_z_lower: int = 3,
                             n_samples: int = 40,
                             lower_garment: str = "pants"):
    """Train a two-garment subspace pair from inflated copies of the body.

    Each training sample pushes the masked region outward along the vertex
    normals by a few centimeters, modulated by smooth random fields, so the
    learned bases span thickness and low-frequency drape variation.
    """
    rng = np.random.default_rng(seed)
    mask_u, mask_l = garment_vertex_masks(body, lower_garment)
    template = body.template_vertices
    normals = vertex_normals(template, body.faces, warn_degenerate=False)

    def smooth_fields(n_fields, r):
        dirs = r.standard_normal((n_fields, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        phases = r.uniform(0, 2 * np.pi, n_fields)
        freq = r.uniform(2.0, 5.0, n_fields)
        return np.sin(freq[None, :] * (template @ dirs.T) + phases[None, :])

    def samples_for(mask, base_amp, n_fields):
        # Wide amplitude spread: the deviation modes must move the outline by
        # multiple pixels at capture resolution, or the subspace is not
        # observable from a monocular silhouette.
        fields = smooth_fields(n_fields, rng)
        out = []
        for _ in range(n_samples):
            amp = base_amp * (1.0 + 0.6 * rng.uniform(-1, 1))
            coeff = 0.4 * rng.standard_normal(n_fields)
            scale = np.maximum(0.2, 1.0 + fields @ coeff)
            offsets = normals * (amp * scale)[:, None] * mask[:, None]
            out.append(template + offsets)
        return out

    clothed_u = samples_for(mask_u, 0.050, 4)
    clothed_l = samples_for(mask_l, 0.040, 4)
    rests = [template] * n_samples
    upper = train_model(clothed_u, rests, mask_u, n_z_upper,
                        garment_type="tshirt", region="upper")
    lower = train_model(clothed_l, rests, mask_l, n_z_lower,
                        garment_type=lower_garment, region="lower")
    return upper, lower


def procedural_texture(size: int, seed: int = 0, block: int = 8) -> np.ndarray:
    """High-contrast random color blocks in [0.05, 0.95], seeded."""
    rng = np.random.default_rng(seed)
    nb = (size + block - 1) // block
    colors = rng.uniform(0.05, 0.95, (nb, nb, 3))
    return np.repeat(np.repeat(colors, block, axis=0), block, axis=1)[:size, :size]


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class SequenceSpec:
    n_frames: int = 30
    width: int = 256
    height: int = 256
    focal: float = 300.0
    seed: int = 0
    pose_amplitude: float = 0.12       # radians on non-root joints
    root_amplitude: float = 0.06
    translation_amplitude: float = 0.04
    z_amplitude: float = 1.2           # std units of the garment subspace
    center_depth: float = 2.8
    knots: int = 5
    densepose_count: int = 300
    beta_amplitude: float = 0.2
    texture_size: int = 256
    sigma: float = 1e-4


def _spline_track(rng, n_frames, dim, amplitude, knots):
    """Smooth seeded trajectory through random control points, (F, dim)."""
    k = max(3, knots)
    t_knots = np.linspace(0.0, 1.0, k)
    vals = amplitude * rng.standard_normal((k, dim))
    spline = CubicSpline(t_knots, vals, axis=0, bc_type="natural")
    return spline(np.linspace(0.0, 1.0, n_frames))


def plant_trajectories(body: ParametricBody, upper: ClothingModel,
                       lower: ClothingModel, spec: SequenceSpec):
    """Planted (beta, thetas, translations, z_upper, z_lower)."""
    rng = np.random.default_rng(spec.seed)
    beta = spec.beta_amplitude * rng.standard_normal(body.n_shape)
    nj = body.n_joints
    thetas = np.zeros((spec.n_frames, 3 * nj))
    non_root = _spline_track(rng, spec.n_frames, 3 * (nj - 1),
                             spec.pose_amplitude, spec.knots)
    root = _spline_track(rng, spec.n_frames, 3, spec.root_amplitude, spec.knots)
    thetas[:, :3] = root
    thetas[:, 3:] = non_root
    translations = _spline_track(rng, spec.n_frames, 3,
                                 spec.translation_amplitude, spec.knots)
    translations[:, 2] += spec.center_depth
    zu = _spline_track(rng, spec.n_frames, upper.n_z, spec.z_amplitude, spec.knots)
    zl = _spline_track(rng, spec.n_frames, lower.n_z, spec.z_amplitude, spec.knots)
    return beta, thetas, translations, zu, zl


def sample_pose_bank(body: ParametricBody, spec: SequenceSpec, count: int = 400,
                     seed_offset: int = 101) -> np.ndarray:
    """Poses drawn from the trajectory distribution, for fitting the prior."""
    rng = np.random.default_rng(spec.seed + seed_offset)
    nj = body.n_joints
    bank = np.zeros((count, 3 * nj))
    bank[:, :3] = spec.root_amplitude * rng.standard_normal((count, 3))
    bank[:, 3:] = spec.pose_amplitude * rng.standard_normal((count, 3 * (nj - 1)))
    return bank


# ---------------------------------------------------------------------------
# Ground truth


@dataclass
class GroundTruth:
    beta: np.ndarray
    focal: float
    thetas: np.ndarray          # (F, 3 n_joints)
    translations: np.ndarray    # (F, 3)
    z_upper: np.ndarray         # (F, n_z_upper)
    z_lower: np.ndarray         # (F, n_z_lower)
    joints: np.ndarray          # (F, n_joints, 3) world space
    clothed_vertices: np.ndarray  # (F, n_vertices, 3) world space
    body_vertices: np.ndarray     # (F, n_vertices, 3) bare body, world space
    faces: np.ndarray
    labels: np.ndarray          # (F, n_vertices) 0 skin / 1 upper / 2 lower

    @property
    def n_frames(self) -> int:
        return len(self.thetas)


def save_ground_truth(path, gt: GroundTruth) -> None:
    np.savez_compressed(
        path, beta=gt.beta, focal=np.array([gt.focal]), thetas=gt.thetas,
        translations=gt.translations, z_upper=gt.z_upper, z_lower=gt.z_lower,
        joints=gt.joints, clothed_vertices=gt.clothed_vertices,
        body_vertices=gt.body_vertices, faces=gt.faces, labels=gt.labels)


def load_ground_truth(path) -> GroundTruth:
    with np.load(path) as data:
        return GroundTruth(
            beta=data["beta"], focal=float(data["focal"][0]),
            thetas=data["thetas"], translations=data["translations"],
            z_upper=data["z_upper"], z_lower=data["z_lower"],
            joints=data["joints"], clothed_vertices=data["clothed_vertices"],
            body_vertices=data["body_vertices"], faces=data["faces"],
            labels=data["labels"])


def _visible_vertex_ids(mesh: Mesh, cam: CameraIntrinsics,
                        config: RasterConfig) -> np.ndarray:
    """Vertices whose projection wins the depth test (front surface)."""
    depth, _ = depth_map(mesh, cam, config)
    pix = project(mesh.vertices, cam)
    col = np.floor(pix[:, 0]).astype(int)
    row = np.floor(pix[:, 1]).astype(int)
    inside = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    ok = np.zeros(len(pix), dtype=bool)
    idx = np.nonzero(inside)[0]
    z = mesh.vertices[idx, 2]
    buf = depth[row[idx], col[idx]]
    ok[idx] = z <= buf + 1e-6 + 0.01 * z
    return np.nonzero(ok)[0]


def _label_masks(frag, labels: np.ndarray, height: int, width: int):
    """Per-pixel garment label from the dominant corner of each fragment."""
    corner_lbl = labels[frag.corners]                      # (k, 3)
    pick = np.argmax(frag.bary, axis=1)
    lbl = corner_lbl[np.arange(len(pick)), pick]
    img = np.full(height * width, -1, dtype=np.int8)
    img[frag.pixel_ids] = lbl
    return img.reshape(height, width)


def generate_sequence(body: ParametricBody, upper: ClothingModel,
                      lower: ClothingModel, spec: SequenceSpec, out_dir,
                      texture: np.ndarray | None = None) -> GroundTruth:
    """Render a planted sequence and write measurements + ground truth.

    The output tree is ``manifest.json`` plus a ``frames/`` directory and a
    ``gt/`` directory. Everything derives from the seed; rerunning with the
    same spec reproduces the tree bit for bit.
    """
    if body.uv_coords is None:
        raise InvalidInputError("sequence generation needs a UV-mapped body")
    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    gt_dir = os.path.join(out_dir, "gt")
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)

    if texture is None:
        texture = procedural_texture(spec.texture_size, spec.seed + 7)
    beta, thetas, translations, zu, zl = plant_trajectories(body, upper, lower, spec)
    cam = CameraIntrinsics.centered(spec.focal, spec.width, spec.height)
    config = RasterConfig(sigma=spec.sigma)
    rng = np.random.default_rng(spec.seed + 13)

    F = spec.n_frames
    n = body.n_vertices
    joints = np.zeros((F, body.n_joints, 3))
    clothed_all = np.zeros((F, n, 3))
    body_all = np.zeros((F, n, 3))
    labels = np.zeros((F, n), dtype=np.int8)
    entries = []

    for i in range(F):
        params = BodyParams(beta, thetas[i], translations[i])
        du = decode_offsets(upper, zu[i])
        dl = decode_offsets(lower, zl[i])
        merged = merge_offsets(du, dl)
        labels[i] = classify_vertices(du, dl, DEFAULT_SKIN_EPSILON)
        posed = PosedBody(body, params, rest_offsets=merged)
        bare = PosedBody(body, params)
        verts = posed.vertices
        joints[i] = posed.posed_joints + params.translation
        clothed_all[i] = verts
        body_all[i] = bare.vertices

        pix = project(verts, cam)
        if (pix[:, 0].min() < 0.5 or pix[:, 0].max() > spec.width - 0.5
                or pix[:, 1].min() < 0.5 or pix[:, 1].max() > spec.height - 0.5):
            raise GenerationError(f"frame {i}: mesh leaves the camera frustum")

        mesh = body.mesh(verts)
        render = render_texture(mesh, texture, cam, config)
        image = np.clip(np.rint(render.image * 255.0), 0, 255).astype(np.uint8)
        frag = rasterize(pix, verts[:, 2], body.faces, spec.width, spec.height,
                         config)
        sil = frag.coverage
        lbl_img = _label_masks(frag, labels[i], spec.height, spec.width)
        seg_u = lbl_img == UPPER
        seg_l = lbl_img == LOWER

        names = {
            "image": f"frames/image_{i:06d}.ppm",
            "keypoints": f"frames/keypoints_{i:06d}.json",
            "silhouette": f"frames/silhouette_{i:06d}.pgm",
            "seg_upper": f"frames/seg_upper_{i:06d}.pgm",
            "seg_lower": f"frames/seg_lower_{i:06d}.pgm",
            "densepose": f"frames/densepose_{i:06d}.json",
            "pof": f"frames/pof_{i:06d}.json",
            "normal": f"frames/normal_{i:06d}.pfm",
        }
        write_ppm(os.path.join(out_dir, names["image"]), image)
        write_pgm(os.path.join(out_dir, names["silhouette"]), bool_to_mask(sil))
        write_pgm(os.path.join(out_dir, names["seg_upper"]), bool_to_mask(seg_u))
        write_pgm(os.path.join(out_dir, names["seg_lower"]), bool_to_mask(seg_l))

        kp = project(joints[i], cam)
        with open(os.path.join(out_dir, names["keypoints"]), "w") as fh:
            json.dump({"joints": [[float(x), float(y), 1.0] for x, y in kp]},
                      fh, indent=1)

        # Dense samples: visible skin-label vertices (clothing hides the body).
        visible = _visible_vertex_ids(mesh, cam, config)
        skin_visible = visible[labels[i][visible] == SKIN]
        count = min(spec.densepose_count, len(skin_visible))
        chosen = rng.choice(skin_visible, size=count, replace=False) if count else []
        samples = [{"px": float(pix[v, 0]), "py": float(pix[v, 1]), "v": int(v)}
                   for v in sorted(map(int, chosen))]
        with open(os.path.join(out_dir, names["densepose"]), "w") as fh:
            json.dump({"samples": samples}, fh, indent=1)

        bones = []
        for j in range(body.n_joints):
            par = body.parents[j]
            if par < 0:
                continue
            d = joints[i, j] - joints[i, par]
            nrm = np.linalg.norm(d)
            if nrm < 1e-9:
                continue
            d = d / nrm
            bones.append({"a": int(par), "b": int(j),
                          "dir": [float(c) for c in d]})
        with open(os.path.join(out_dir, names["pof"]), "w") as fh:
            json.dump({"bones": bones}, fh, indent=1)

        nrm_render = render_normals(mesh, cam, config)
        write_pfm(os.path.join(out_dir, names["normal"]),
                  nrm_render.image.astype(np.float32))
        entries.append(names)

    manifest = {
        "n_frames": F,
        "width": spec.width,
        "height": spec.height,
        "lower_garment": lower.garment_type,
        "frames": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)

    gt = GroundTruth(beta=beta, focal=spec.focal, thetas=thetas,
                     translations=translations, z_upper=zu, z_lower=zl,
                     joints=joints, clothed_vertices=clothed_all,
                     body_vertices=body_all, faces=body.faces.copy(),
                     labels=labels)
    save_ground_truth(os.path.join(gt_dir, "ground_truth.npz"), gt)
    return gt


def emit_dataset(out_dir, seed: int = 0, spec: SequenceSpec | None = None,
                 n_vertices: int = 2000, n_z_upper: int = 5, n_z_lower: int = 3,
                 lower_garment: str = "pants", prior_components: int = 8):
    """Full closed-loop dataset: body, garment models, pose prior, sequence.

    Returns (body, upper, lower, ground truth). Layout under ``out_dir``:
    ``body/``, ``models/upper/``, ``models/lower/``, ``prior/``, ``frames/``,
    ``gt/`` and ``manifest.json``.
    """
    from .body import make_mini_body

    if spec is None:
        spec = SequenceSpec(seed=seed)
    body = make_mini_body(seed=seed, n_vertices=n_vertices)
    upper, lower = make_toy_clothing_models(body, seed=seed + 1,
                                            n_z_upper=n_z_upper,
                                            n_z_lower=n_z_lower,
                                            lower_garment=lower_garment)
    os.makedirs(out_dir, exist_ok=True)
    save_body(os.path.join(out_dir, "body"), body)
    save_model(os.path.join(out_dir, "models", "upper"), upper)
    save_model(os.path.join(out_dir, "models", "lower"), lower)

    bank = sample_pose_bank(body, spec)
    prior = fit_gmm(bank, n_components=prior_components, seed=spec.seed)
    save_gmm(os.path.join(out_dir, "prior"), prior)

    gt = generate_sequence(body, upper, lower, spec, out_dir)
    return body, upper, lower, gt


# ---------------------------------------------------------------------------
# Alignment and metrics


@dataclass
class AlignmentTransform:
    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points + self.translation


def align_scale_translation(pred: np.ndarray, gt: np.ndarray) -> AlignmentTransform:
    """Least-squares s, t minimizing ||s pred + t - gt||^2 (correspondence given)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or len(pred) < 2:
        raise InvalidInputError("need matching point sets with at least 2 points")
    pc = pred.mean(axis=0)
    gc = gt.mean(axis=0)
    pd = pred - pc
    denom = float(np.sum(pd * pd))
    if denom < 1e-18:
        raise AlignmentError("prediction points are degenerate (no spread)")
    s = float(np.sum(pd * (gt - gc))) / denom
    if s <= 0:
        raise AlignmentError("alignment collapsed to non-positive scale")
    return AlignmentTransform(s, gc - s * pc)


def eval_surface_error(gt_points: np.ndarray, pred_mesh: Mesh,
                       align: bool = True,
                       correspondence: np.ndarray | None = None) -> float:
    """Mean distance (mm) from ground-truth points to the predicted surface.

    With ``align``, a scale+translation fit maps the prediction onto the
    ground truth first; ``correspondence`` gives the predicted-vertex index
    for each ground-truth point (same-topology meshes), falling back to a
    centroid/spread alignment when absent.
    """
    gt_points = np.asarray(gt_points, dtype=np.float64)
    if len(gt_points) == 0:
        raise InvalidInputError("no ground-truth points in the clothing region")
    verts = pred_mesh.vertices
    if align:
        if correspondence is not None:
            t = align_scale_translation(verts[correspondence], gt_points)
        else:
            pc, gc = verts.mean(axis=0), gt_points.mean(axis=0)
            ps = np.sqrt(np.mean(np.sum((verts - pc) ** 2, axis=1)))
            gs = np.sqrt(np.mean(np.sum((gt_points - gc) ** 2, axis=1)))
            if ps < 1e-12:
                raise AlignmentError("prediction points are degenerate (no spread)")
            s = gs / ps
            t = AlignmentTransform(s, gc - s * pc)
        verts = t.apply(verts)
    dist = point_to_surface(gt_points, Mesh(verts, pred_mesh.faces))
    return float(dist * MM)


def eval_joint_error(gt_joints: np.ndarray, pred_joints: np.ndarray) -> float:
    """Mean per-joint error (mm) after per-frame translation alignment."""
    gt_joints = np.asarray(gt_joints, dtype=np.float64)
    pred_joints = np.asarray(pred_joints, dtype=np.float64)
    if gt_joints.shape != pred_joints.shape:
        raise InvalidInputError("joint array shapes differ")
    if gt_joints.ndim == 2:
        gt_joints = gt_joints[None]
        pred_joints = pred_joints[None]
    total = 0.0
    for g, p in zip(gt_joints, pred_joints):
        p_al = p + (g.mean(axis=0) - p.mean(axis=0))
        total += float(np.mean(np.linalg.norm(p_al - g, axis=1)))
    return total / len(gt_joints) * MM
