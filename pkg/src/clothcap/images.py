"""Image file I/O: 8-bit PGM/PPM and float PFM.

Grayscale masks travel as binary PGM (P5), color images as binary PPM (P6),
float images (normal maps) as little-endian PFM. All readers return numpy
arrays with row 0 at the top of the image; PFM files store rows bottom-up per
the format and are flipped on read/write.
"""

from pathlib import Path

import numpy as np

from .errors import InvalidInputError


def _read_pnm_header(fh, magic: bytes):
    got = fh.read(2)
    if got != magic:
        raise InvalidInputError(f"expected {magic!r} header, found {got!r}")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise InvalidInputError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        fields.extend(line.split())
    width, height, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise InvalidInputError(f"only 8-bit PNM supported, maxval={maxval}")
    return width, height


def write_pgm(path, img: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise InvalidInputError(f"PGM needs a 2-D array, got shape {img.shape}")
    data = np.ascontiguousarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        width, height = _read_pnm_header(fh, b"P5")
        raw = fh.read(width * height)
    if len(raw) != width * height:
        raise InvalidInputError(f"{path}: truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy()


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"PPM needs (H, W, 3), got shape {img.shape}")
    data = np.ascontiguousarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        width, height = _read_pnm_header(fh, b"P6")
        raw = fh.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise InvalidInputError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


def write_pfm(path, img: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float array as little-endian PFM."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        magic, chans = b"Pf", 1
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, chans = b"PF", 3
    else:
        raise InvalidInputError(f"PFM needs (H, W) or (H, W, 3), got shape {img.shape}")
    data = np.ascontiguousarray(img[::-1], dtype="<f4")  # PFM rows run bottom-up
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n-1.0\n" % (img.shape[1], img.shape[0]))
        fh.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            chans = 3
        elif magic == b"Pf":
            chans = 1
        else:
            raise InvalidInputError(f"{path}: not a PFM file (magic {magic!r})")
        width, height = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        raw = fh.read(width * height * chans * 4)
    if len(raw) != width * height * chans * 4:
        raise InvalidInputError(f"{path}: truncated PFM payload")
    img = np.frombuffer(raw, dtype=dt).reshape(height, width, chans)[::-1]
    img = img.astype(np.float64)
    return img[:, :, 0] if chans == 1 else img


def mask_to_bool(img: np.ndarray) -> np.ndarray:
    """8-bit mask -> bool via the fixed threshold 128."""
    return np.asarray(img) >= 128


def bool_to_mask(mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
