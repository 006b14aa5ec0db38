"""Per-garment linear deformation subspaces on the body template.

A clothing model stores, for one garment, a masked linear basis of unposed
per-vertex offsets from the body surface. Two garments (upper, lower) cover
the body; their decoded offset fields merge per vertex by magnitude before
posing. Coefficients live in standard-deviation units: basis columns are left
singular vectors scaled by ``singular_value / sqrt(n_samples - 1)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import container
from .body import BodyParams, ParametricBody, PosedBody
from .errors import ContainerError, InvalidInputError
from .geometry import Mesh

GARMENT_TYPES = ("tshirt", "shorts", "pants")
REGIONS = ("upper", "lower")
SKIN, UPPER, LOWER = 0, 1, 2  # vertex labels

DEFAULT_SKIN_EPSILON = 0.003  # offsets below 3 mm count as bare skin


@dataclass
class ClothingModel:
    """Linear offset subspace for a single garment."""

    garment_type: str
    region: str
    basis: np.ndarray       # (3n, n_z), columns orthogonal, rows masked
    mean: np.ndarray        # (3n,), masked
    vertex_mask: np.ndarray  # (n,) bool

    def __post_init__(self):
        if self.garment_type not in GARMENT_TYPES:
            raise InvalidInputError(f"unknown garment type {self.garment_type!r}")
        if self.region not in REGIONS:
            raise InvalidInputError(f"unknown region {self.region!r}")
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.vertex_mask = np.asarray(self.vertex_mask, dtype=bool).ravel()
        n = len(self.vertex_mask)
        if self.basis.shape[0] != 3 * n or self.mean.shape[0] != 3 * n:
            raise InvalidInputError("basis/mean rows must equal 3 * n_vertices")
        row_mask = np.repeat(self.vertex_mask, 3)
        if self.basis[~row_mask].any() or self.mean[~row_mask].any():
            raise InvalidInputError("basis/mean must be zero outside the vertex mask")
        if self.n_z > 1:
            gram = self.basis.T @ self.basis
            off = gram - np.diag(np.diag(gram))
            if np.abs(off).max() > 1e-6 * max(1.0, np.abs(np.diag(gram)).max()):
                raise InvalidInputError("basis columns must be mutually orthogonal")

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_mask)

    @property
    def n_z(self) -> int:
        return self.basis.shape[1]


@dataclass
class ClothingParams:
    """Coefficients for both garments of one frame."""

    z_upper: np.ndarray
    z_lower: np.ndarray

    def __post_init__(self):
        self.z_upper = np.asarray(self.z_upper, dtype=np.float64).ravel()
        self.z_lower = np.asarray(self.z_lower, dtype=np.float64).ravel()

    @staticmethod
    def zeros(n_z_upper: int, n_z_lower: int) -> "ClothingParams":
        return ClothingParams(np.zeros(n_z_upper), np.zeros(n_z_lower))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.z_upper, self.z_lower])

    @staticmethod
    def from_stacked(z: np.ndarray, n_z_upper: int) -> "ClothingParams":
        z = np.asarray(z, dtype=np.float64).ravel()
        return ClothingParams(z[:n_z_upper], z[n_z_upper:])


def decode_offsets(model: ClothingModel, z: np.ndarray) -> np.ndarray:
    """Coefficients -> per-vertex unposed offsets (n, 3)."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if len(z) != model.n_z:
        raise InvalidInputError(f"expected {model.n_z} coefficients, got {len(z)}")
    return (model.basis @ z + model.mean).reshape(-1, 3)


def encode_offsets(model: ClothingModel, offsets: np.ndarray) -> np.ndarray:
    """Least-squares coefficients for an offset field (n, 3)."""
    x = np.asarray(offsets, dtype=np.float64).reshape(-1) - model.mean
    z, *_ = np.linalg.lstsq(model.basis, x, rcond=None)
    return z


def upper_wins(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Per-vertex selector: True where the upper offset dominates (ties -> upper)."""
    u2 = np.einsum("nd,nd->n", upper, upper)
    l2 = np.einsum("nd,nd->n", lower, lower)
    return u2 >= l2


def merge_offsets(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Combine two garment offset fields, larger magnitude wins per vertex."""
    upper = np.asarray(upper, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    if upper.shape != lower.shape:
        raise InvalidInputError("offset fields must have matching shapes")
    return np.where(upper_wins(upper, lower)[:, None], upper, lower)


def classify_vertices(upper: np.ndarray, lower: np.ndarray,
                      epsilon: float = DEFAULT_SKIN_EPSILON) -> np.ndarray:
    """Label vertices skin (0) / upper (1) / lower (2) from decoded offsets.

    A vertex is skin when the merged offset norm is below ``epsilon``;
    otherwise the garment with the larger offset wins, ties going to upper.
    """
    if epsilon < 0:
        raise InvalidInputError("epsilon must be non-negative")
    up = upper_wins(upper, lower)
    merged_sq = np.where(up, np.einsum("nd,nd->n", upper, upper),
                         np.einsum("nd,nd->n", lower, lower))
    labels = np.where(up, UPPER, LOWER).astype(np.uint8)
    labels[merged_sq < epsilon**2] = SKIN
    return labels


def clothed_rest_shape(body: ParametricBody, params: BodyParams,
                       upper: ClothingModel, lower: ClothingModel,
                       cloth: ClothingParams) -> np.ndarray:
    """Unposed clothed vertices: body rest shape plus merged garment offsets."""
    from .body import rest_shape
    merged = merge_offsets(decode_offsets(upper, cloth.z_upper),
                           decode_offsets(lower, cloth.z_lower))
    return rest_shape(body, params) + merged


def pose_clothed(body: ParametricBody, params: BodyParams,
                 upper: ClothingModel, lower: ClothingModel,
                 cloth: ClothingParams) -> Mesh:
    """Posed clothed mesh: merged offsets ride the body's skinning."""
    merged = merge_offsets(decode_offsets(upper, cloth.z_upper),
                           decode_offsets(lower, cloth.z_lower))
    posed = PosedBody(body, params, rest_offsets=merged)
    return body.mesh(posed.vertices)


def train_model(clothed_rest: list, body_rest: list, mask: np.ndarray, n_z: int,
                garment_type: str, region: str) -> ClothingModel:
    """PCA-train a garment subspace from registered unposed vertex sets.

    Offsets are (clothed - body) zeroed outside ``mask``; the returned basis
    holds the top ``n_z`` left singular vectors of the centered offset matrix,
    each scaled by its singular value over sqrt(n_samples - 1), so that
    coefficients are in standard-deviation units.
    """
    if len(clothed_rest) != len(body_rest) or len(clothed_rest) < 2:
        raise InvalidInputError("need matching clothed/body sample lists (>= 2 samples)")
    mask = np.asarray(mask, dtype=bool).ravel()
    n = len(mask)
    cols = []
    for c, b in zip(clothed_rest, body_rest):
        c = np.asarray(c, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if c.shape != (n, 3) or b.shape != (n, 3):
            raise InvalidInputError("samples must be (n, 3) matching the mask length")
        off = (c - b) * mask[:, None]
        cols.append(off.ravel())
    X = np.stack(cols, axis=1)  # (3n, n_samples)
    n_samples = X.shape[1]
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]

    rank_cap = n_samples - 1
    if n_z > rank_cap:
        warnings.warn(f"n_z={n_z} exceeds sample rank {rank_cap}; truncating")
        n_z = rank_cap
    if n_z < 1:
        raise InvalidInputError("n_z must be >= 1")
    u, s, _ = np.linalg.svd(Xc, full_matrices=False)
    basis = u[:, :n_z] * (s[:n_z] / np.sqrt(n_samples - 1.0))[None, :]
    row_mask = np.repeat(mask, 3)
    basis[~row_mask] = 0.0  # exact zeros outside the garment
    mean[~row_mask] = 0.0
    return ClothingModel(garment_type, region, basis, mean, mask)


# ---------------------------------------------------------------------------
# Container I/O


def save_model(path, model: ClothingModel) -> None:
    meta = {
        "garment_type": model.garment_type,
        "region": model.region,
        "n_z": model.n_z,
        "scaling": "std_units",
    }
    container.write_container(path, "clothing_model", meta, {
        "basis": model.basis,
        "mean": model.mean,
        "mask": model.vertex_mask.astype(np.uint8),
    })


def load_model(path) -> ClothingModel:
    manifest, arrays = container.read_container(path, expected_kind="clothing_model")
    if manifest.get("scaling") != "std_units":
        raise ContainerError(f"{path}: unsupported scaling {manifest.get('scaling')!r}")
    model = ClothingModel(manifest["garment_type"], manifest["region"],
                          arrays["basis"], arrays["mean"], arrays["mask"] != 0)
    if model.n_z != int(manifest["n_z"]):
        raise ContainerError(f"{path}: manifest n_z disagrees with the basis width")
    return model
