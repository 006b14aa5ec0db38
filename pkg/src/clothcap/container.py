"""Directory containers: a manifest.json plus raw little-endian blobs.

Body models, clothing models and pose priors are stored as a directory holding
``manifest.json`` and one binary file per array. The manifest records dtype,
shape and file name for every array; payloads are row-major, little-endian.
"""

import json
from pathlib import Path

import numpy as np

from .errors import ContainerError

# dtype tag in the manifest -> (numpy dtype, file suffix)
_DTYPES = {
    "float32": (np.dtype("<f4"), ".f32"),
    "uint32": (np.dtype("<u4"), ".u32"),
    "uint8": (np.dtype("u1"), ".u8"),
}


def _dtype_tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "float32"
    if kind in "ui":
        return "uint8" if arr.dtype.itemsize == 1 else "uint32"
    raise ContainerError(f"unsupported array dtype {arr.dtype}")


def write_container(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write ``arrays`` plus metadata to directory ``path``.

    Floating arrays are stored as float32, integer arrays as uint32 (uint8 when
    the itemsize is one byte). ``meta`` must be JSON-serializable.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        dt, suffix = _DTYPES[tag]
        fname = name + suffix
        data = np.ascontiguousarray(arr, dtype=dt)
        (path / fname).write_bytes(data.tobytes())
        entries[name] = {"file": fname, "dtype": tag, "shape": list(arr.shape)}
    manifest = {"kind": kind, "endianness": "little", "arrays": entries}
    manifest.update(meta)
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_container(path, expected_kind: str | None = None):
    """Read a container directory; returns ``(manifest, arrays)``.

    Arrays come back as float64 / int64 / uint8 for float32 / uint32 / uint8
    payloads. Length or shape mismatches raise ContainerError.
    """
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise ContainerError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"unparseable manifest in {path}: {exc}") from exc
    if expected_kind is not None and manifest.get("kind") != expected_kind:
        raise ContainerError(
            f"{path}: expected kind {expected_kind!r}, found {manifest.get('kind')!r}")
    if manifest.get("endianness", "little") != "little":
        raise ContainerError(f"{path}: unsupported endianness {manifest['endianness']!r}")
    arrays = {}
    for name, entry in manifest.get("arrays", {}).items():
        tag = entry["dtype"]
        if tag not in _DTYPES:
            raise ContainerError(f"{path}: unknown dtype tag {tag!r} for array {name!r}")
        dt, _ = _DTYPES[tag]
        shape = tuple(int(s) for s in entry["shape"])
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise ContainerError(f"{path}: missing blob {entry['file']!r}")
        raw = fpath.read_bytes()
        expected = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
        if len(raw) != expected:
            raise ContainerError(
                f"{path}: blob {entry['file']!r} holds {len(raw)} bytes, "
                f"manifest shape {shape} needs {expected}")
        arr = np.frombuffer(raw, dtype=dt).reshape(shape)
        if tag == "float32":
            arr = arr.astype(np.float64)
        elif tag == "uint32":
            arr = arr.astype(np.int64)
        else:
            arr = arr.copy()
        arrays[name] = arr
    return manifest, arrays
