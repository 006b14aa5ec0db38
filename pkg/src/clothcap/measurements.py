"""Loading and validation of per-frame measurement files, and result export.

A sequence lives in a directory with a JSON manifest of relative paths. Per
frame the mandatory measurements are the RGB image, the keypoint JSON and the
person silhouette; garment segmentation masks, dense pixel-vertex samples,
bone-direction targets and a normal map are optional and simply absent from
the loaded record when not listed.

Every warning and error names the offending file and frame index. Masks must
be strictly binary (0 or 255); negative keypoint confidences are clamped to
zero with a warning.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .body import BodyParams
from .clothing import GARMENT_TYPES
from .errors import InvalidInputError, ManifestError
from .geometry import write_obj
from .images import mask_to_bool, read_pfm, read_pgm, read_ppm, write_pgm, write_ppm


@dataclass
class FrameMeasurements:
    image: np.ndarray                 # (H, W, 3) float in [0, 1]
    keypoints2d: np.ndarray           # (n_joints, 3) of (x, y, conf)
    silhouette: np.ndarray            # (H, W) bool
    seg_upper: np.ndarray | None = None
    seg_lower: np.ndarray | None = None
    densepose_samples: tuple | None = None   # (pixels (m, 2), vertex ids (m,))
    pof_targets: tuple | None = None         # (parents (m,), children (m,), dirs (m, 3))
    normal_map: np.ndarray | None = None     # (H, W, 3) float


@dataclass
class Sequence:
    frames: list
    width: int
    height: int
    lower_garment: str

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


def _load_mask(path, frame_idx: int, what: str) -> np.ndarray:
    img = read_pgm(path)
    bad = ~np.isin(img, (0, 255))
    if np.any(bad):
        raise InvalidInputError(
            f"frame {frame_idx}: {what} mask {path} is not binary "
            f"(found value {int(img[bad][0])})")
    return mask_to_bool(img)


def _load_keypoints(path, frame_idx: int) -> np.ndarray:
    with open(path) as fh:
        data = json.load(fh)
    joints = np.asarray(data["joints"], dtype=np.float64)
    if joints.ndim != 2 or joints.shape[1] != 3:
        raise InvalidInputError(f"frame {frame_idx}: keypoints {path} must be (n, 3)")
    neg = joints[:, 2] < 0
    if np.any(neg):
        warnings.warn(f"frame {frame_idx}: {int(neg.sum())} negative confidence(s) "
                      f"in {path} clamped to 0")
        joints[neg, 2] = 0.0
    return joints


def _load_densepose(path, frame_idx: int):
    with open(path) as fh:
        data = json.load(fh)
    samples = data["samples"]
    if not samples:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    pix = np.array([[s["px"], s["py"]] for s in samples], dtype=np.float64)
    ids = np.array([s["v"] for s in samples], dtype=np.int64)
    if np.any(ids < 0):
        raise InvalidInputError(f"frame {frame_idx}: negative vertex index in {path}")
    return pix, ids


def _load_pof(path, frame_idx: int):
    with open(path) as fh:
        data = json.load(fh)
    bones = data["bones"]
    if not bones:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros((0, 3)))
    par = np.array([b["a"] for b in bones], dtype=np.int64)
    chi = np.array([b["b"] for b in bones], dtype=np.int64)
    dirs = np.array([b["dir"] for b in bones], dtype=np.float64)
    return par, chi, dirs


def load_sequence(manifest_path) -> Sequence:
    """Load and validate a measurement sequence from its JSON manifest."""
    manifest_path = os.fspath(manifest_path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {manifest_path}: {exc}") from exc
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {manifest_path}: {exc}") from exc

    base = os.path.dirname(manifest_path)
    for key in ("n_frames", "width", "height", "frames"):
        if key not in manifest:
            raise ManifestError(f"manifest {manifest_path} missing field {key!r}")
    width = int(manifest["width"])
    height = int(manifest["height"])
    lower = manifest.get("lower_garment", "pants")
    if lower not in GARMENT_TYPES:
        raise ManifestError(f"unknown lower garment type {lower!r}")
    entries = manifest["frames"]
    if len(entries) != manifest["n_frames"]:
        raise ManifestError(f"manifest {manifest_path} lists {len(entries)} frames, "
                            f"declares {manifest['n_frames']}")

    def resolve(rel):
        return os.path.join(base, rel)

    def check_shape(arr, frame_idx, what, path):
        if arr.shape[:2] != (height, width):
            raise InvalidInputError(
                f"frame {frame_idx}: {what} {path} has resolution "
                f"{arr.shape[1]}x{arr.shape[0]}, manifest says {width}x{height}")

    frames = []
    for i, entry in enumerate(entries):
        for key in ("image", "keypoints", "silhouette"):
            if key not in entry:
                raise ManifestError(f"frame {i}: manifest entry missing {key!r}")
            if not os.path.exists(resolve(entry[key])):
                raise ManifestError(f"frame {i}: missing file {resolve(entry[key])}")

        image = read_ppm(resolve(entry["image"])).astype(np.float64) / 255.0
        check_shape(image, i, "image", entry["image"])
        keypoints = _load_keypoints(resolve(entry["keypoints"]), i)
        sil = _load_mask(resolve(entry["silhouette"]), i, "silhouette")
        check_shape(sil, i, "silhouette", entry["silhouette"])

        segs = {}
        for key in ("seg_upper", "seg_lower"):
            if key in entry:
                seg = _load_mask(resolve(entry[key]), i, key)
                check_shape(seg, i, key, entry[key])
                outside = np.sum(seg & ~sil)
                if outside > 0.02 * max(1, np.sum(seg)):
                    warnings.warn(
                        f"frame {i}: {key} {entry[key]} leaks "
                        f"{int(outside)} px outside the silhouette")
                segs[key] = seg

        densepose = (_load_densepose(resolve(entry["densepose"]), i)
                     if "densepose" in entry else None)
        pof = _load_pof(resolve(entry["pof"]), i) if "pof" in entry else None
        normal = None
        if "normal" in entry:
            normal = read_pfm(resolve(entry["normal"]))
            check_shape(normal, i, "normal map", entry["normal"])

        frames.append(FrameMeasurements(
            image=image, keypoints2d=keypoints, silhouette=sil,
            seg_upper=segs.get("seg_upper"), seg_lower=segs.get("seg_lower"),
            densepose_samples=densepose, pof_targets=pof, normal_map=normal))

    return Sequence(frames, width, height, lower)


# ---------------------------------------------------------------------------
# Export


def export_results(state, out_dir) -> None:
    """Write meshes, texture, parameters and per-frame energies for a run.

    ``state`` is a pipeline CaptureState; stages that did not run leave their
    fields None, and exporting an incomplete state raises naming the missing
    stage. Wrinkled meshes are optional (the stage can be disabled).
    """
    if state.beta is None or state.thetas is None:
        raise InvalidInputError("export needs a completed body stage")
    if state.body_meshes is None:
        raise InvalidInputError("export needs posed body meshes")
    os.makedirs(out_dir, exist_ok=True)

    n = len(state.thetas)
    for i in range(n):
        write_obj(os.path.join(out_dir, f"body_{i:06d}.obj"), state.body_meshes[i])
        if state.clothed_meshes is not None:
            write_obj(os.path.join(out_dir, f"clothed_{i:06d}.obj"),
                      state.clothed_meshes[i])
        if state.wrinkled_meshes is not None and state.wrinkled_meshes[i] is not None:
            write_obj(os.path.join(out_dir, f"wrinkled_{i:06d}.obj"),
                      state.wrinkled_meshes[i])

    if state.texture is not None:
        rgb = np.clip(np.rint(state.texture.rgb * 255.0), 0, 255).astype(np.uint8)
        write_ppm(os.path.join(out_dir, "texture.ppm"), rgb)
        write_pgm(os.path.join(out_dir, "texture_valid.pgm"),
                  np.where(state.texture.valid, 255, 0).astype(np.uint8))

    params = {
        "beta": list(state.beta),
        "focal": state.focal,
        "frames": [{
            "theta": list(state.thetas[i]),
            "translation": list(state.translations[i]),
            "z_upper": (list(state.z_upper[i]) if state.z_upper is not None else None),
            "z_lower": (list(state.z_lower[i]) if state.z_lower is not None else None),
        } for i in range(n)],
    }
    with open(os.path.join(out_dir, "params.json"), "w") as fh:
        json.dump(params, fh, indent=2)

    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "stage", "energy"])
        for stage, energies in (state.stage_energies or {}).items():
            for i, e in enumerate(energies):
                writer.writerow([i, stage, repr(float(e))])


def body_params_from_json(path) -> tuple:
    """Read back (beta, focal, [BodyParams ...]) from an exported params.json."""
    with open(path) as fh:
        data = json.load(fh)
    beta = np.asarray(data["beta"], dtype=np.float64)
    frames = [BodyParams(beta, np.asarray(f["theta"], dtype=np.float64),
                         np.asarray(f["translation"], dtype=np.float64))
              for f in data["frames"]]
    return beta, float(data["focal"]), frames
