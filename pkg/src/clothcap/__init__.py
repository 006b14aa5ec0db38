"""Monocular clothing capture.

A skinned parametric body plus per-garment linear offset subspaces are fitted
to per-frame image measurements (keypoints, silhouettes, garment masks, dense
pixel-to-vertex samples, bone directions, normal maps) through differentiable
raster energies minimized with L-BFGS, staged as: body fit, sequential
clothing tracking with texture growing, batch refinement, and per-frame
wrinkle extraction on a subdivided surface.
"""

__version__ = "0.1.0"

from .body import BodyParams, ParametricBody, make_mini_body, pose_body
from .camera import CameraIntrinsics, project
from .clothing import (ClothingModel, ClothingParams, classify_vertices,
                       decode_offsets, merge_offsets, pose_clothed, train_model)
from .geometry import (Mesh, loop_subdivide, point_to_surface, read_obj,
                       skin_lbs, uniform_laplacian, vertex_normals, write_obj)

__all__ = [
    "BodyParams", "CameraIntrinsics", "ClothingModel", "ClothingParams",
    "Mesh", "ParametricBody", "classify_vertices", "decode_offsets",
    "loop_subdivide", "make_mini_body", "merge_offsets", "point_to_surface",
    "pose_body", "pose_clothed", "project", "read_obj", "skin_lbs",
    "train_model", "uniform_laplacian", "vertex_normals", "write_obj",
]
