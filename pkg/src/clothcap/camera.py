"""Pinhole camera: perspective projection and its derivatives.

The camera sits at the origin looking down +z; pixel x runs right, pixel y
runs down, the image origin is the top-left corner. Continuous pixel
coordinates put the center of pixel (row r, col c) at (c + 0.5, r + 0.5).
"""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidInputError

MIN_DEPTH = 1e-6  # points at or behind this camera-space depth cannot project


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image size must be positive")

    @staticmethod
    def centered(focal: float, width: int, height: int) -> "CameraIntrinsics":
        """Single shared focal length, principal point at the image center."""
        return CameraIntrinsics(focal, focal, width / 2.0, height / 2.0, width, height)

    def ndc_scale(self) -> float:
        """Pixel -> isotropic normalized-device scale: 2 / max(width, height)."""
        return 2.0 / max(self.width, self.height)

    def scaled(self, s: float) -> "CameraIntrinsics":
        """Same view at s times the resolution (s in (0, 1] keeps pixels exact)."""
        w, h = int(round(self.width * s)), int(round(self.height * s))
        return CameraIntrinsics(self.fx * s, self.fy * s,
                                self.cx * s, self.cy * s, w, h)


def project(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Perspective-project camera-space points to continuous pixel coords."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = points[:, 2]
    bad = z < MIN_DEPTH
    if bad.any():
        raise BehindCameraError(np.nonzero(bad)[0])
    pix = np.empty((len(points), 2))
    pix[:, 0] = cam.fx * points[:, 0] / z + cam.cx
    pix[:, 1] = cam.fy * points[:, 1] / z + cam.cy
    return pix


def project_jacobian(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(point): (n, 2, 3) for the projection above."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    jac = np.zeros((len(points), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z**2
    return jac


def focal_jacobian(points: np.ndarray) -> np.ndarray:
    """d(pixel)/d(shared focal): (n, 2) assuming fx = fy = f."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return points[:, :2] / points[:, 2:3]


def backproject_pixel(pix_x: float, pix_y: float, depth: float,
                      cam: CameraIntrinsics) -> np.ndarray:
    """Camera-space point of a pixel at the given depth."""
    return np.array([(pix_x - cam.cx) * depth / cam.fx,
                     (pix_y - cam.cy) * depth / cam.fy,
                     depth])
