"""Run configuration: documented defaults, JSON overlays, dotted overrides.

Configs are plain nested dicts so they serialize directly. ``resolve`` deep
merges user values over the defaults and validates; ``set_path`` implements
``--set weights.photo=0`` style overrides with values parsed as JSON first
and falling back to strings.
"""

from __future__ import annotations

import copy
import json
import os

from .errors import InvalidInputError
from .lbfgs import SolverConfig
from .raster import RasterConfig

DEFAULTS = {
    "seed": 0,
    "threads": 0,  # 0 keeps the BLAS/runtime default
    "weights": {
        # body stage
        "kp2d": 1.0,
        "dp": 1.0,
        "bsil": 10.0,
        "pof": 2.0,
        "gmm": 0.05,
        "beta": 0.1,
        "temp_body": 5.0,
        # clothing stages
        "csil": 10.0,
        "cseg": 1.0,
        "photo": 0.5,
        "creg": 0.2,
        "ctemp": 20.0,
        # wrinkle stage
        "normal": 1.0,
        "wreg": 50.0,
        "wlpl": 100.0,
    },
    "raster": {
        "sigma": 1e-4,
        "depth_eps": 1e-7,
        "background": 0.0,
    },
    "solver": {
        "memory": 10,
        "grad_tol": 1e-8,
        "wolfe_c1": 1e-4,
        "wolfe_c2": 0.9,
    },
    # Line-search flavor per stage solve. The clothing stages optimize
    # raster-heavy energies whose pixel-ownership jumps defeat the Wolfe
    # curvature condition; Armijo backtracking descends the same energies
    # at a fraction of the evaluations per iteration.
    "line_search": {
        "body": "wolfe",
        "track": "armijo",
        "batch": "armijo",
        "wrinkles": "wolfe",
    },
    # Iteration budgets per stage solve.
    "iters": {
        "body_warmup": 60,
        "body": 200,
        "track": 60,
        "batch": 120,
        "wrinkles": 80,
    },
    # Silhouette render scale per stage. The body outline carries a coarse,
    # many-pixel signal, so quarter resolution is enough there and much
    # cheaper; clothing offsets move the outline by only a few pixels and
    # need the full grid.
    "silhouette_scale": {
        "body": 0.25,
        "track": 1.0,
        "batch": 1.0,
    },
    # Soft-band width of the silhouette sigmoid per stage (NDC^2). Tracking
    # keeps a wide band to capture frame-to-frame motion; the batch pass
    # tightens it for sub-pixel edge placement.
    "silhouette_sigma": {
        "body": 1e-4,
        "track": 1e-4,
        "batch": 2.5e-5,
    },
    "texture": {
        "size": 512,
        "cos_threshold": 0.3,
    },
    "clothing": {
        "epsilon": 0.003,  # offsets under 3 mm classify as bare skin
        "z_bound": 6.0,    # box bound on subspace coefficients, std units
    },
    "wrinkles": {
        "subdivision_level": 1,
    },
    "stages": {
        "body": True,
        "track": True,
        "batch": True,
        "wrinkles": True,
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise InvalidInputError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise InvalidInputError(f"config key {where} expects a mapping")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def _validate(cfg: dict) -> None:
    for name, w in cfg["weights"].items():
        if not isinstance(w, (int, float)) or w < 0:
            raise InvalidInputError(f"weights.{name} must be >= 0")
    if cfg["raster"]["sigma"] <= 0:
        raise InvalidInputError("raster.sigma must be positive")
    if cfg["texture"]["size"] < 1:
        raise InvalidInputError("texture.size must be >= 1")
    if cfg["wrinkles"]["subdivision_level"] not in (1, 2):
        raise InvalidInputError("wrinkles.subdivision_level must be 1 or 2")
    for stage, s in cfg["silhouette_scale"].items():
        if not 0 < s <= 1:
            raise InvalidInputError(f"silhouette_scale.{stage} must be in (0, 1]")
    for stage, s in cfg["silhouette_sigma"].items():
        if s <= 0:
            raise InvalidInputError(f"silhouette_sigma.{stage} must be positive")
    for stage, n in cfg["iters"].items():
        if not isinstance(n, int) or n < 0:
            raise InvalidInputError(f"iters.{stage} must be a non-negative int")
    for stage, mode in cfg["line_search"].items():
        if mode not in ("wolfe", "armijo"):
            raise InvalidInputError(f"line_search.{stage} must be wolfe or armijo")
    if cfg["clothing"]["epsilon"] < 0:
        raise InvalidInputError("clothing.epsilon must be >= 0")
    if cfg["threads"] < 0:
        raise InvalidInputError("threads must be >= 0")


def resolve(overrides: dict | None = None) -> dict:
    """Defaults overlaid with ``overrides``, deep-merged and validated."""
    cfg = _merge(DEFAULTS, overrides or {})
    _validate(cfg)
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise InvalidInputError(f"{path}: config must be a JSON object")
    return resolve(data)


def set_path(cfg: dict, dotted: str, raw: str) -> None:
    """Apply one ``--set a.b.c=value`` override in place."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise InvalidInputError(f"unknown config key: {dotted}")
        node = node[k]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise InvalidInputError(f"unknown config key: {dotted}")
    if isinstance(node[leaf], dict):
        raise InvalidInputError(f"config key {dotted} is a section, not a value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = value


def write_effective(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)


def raster_config(cfg: dict) -> RasterConfig:
    r = cfg["raster"]
    return RasterConfig(sigma=r["sigma"], depth_eps=r["depth_eps"],
                        background=r["background"])


def silhouette_raster(cfg: dict, stage: str) -> RasterConfig:
    """Raster settings for a stage's silhouette term (stage-specific sigma)."""
    r = cfg["raster"]
    return RasterConfig(sigma=cfg["silhouette_sigma"][stage],
                        depth_eps=r["depth_eps"], background=r["background"])


def solver_config(cfg: dict, stage: str) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(max_iters=cfg["iters"][stage], memory=s["memory"],
                        grad_tol=s["grad_tol"], wolfe_c1=s["wolfe_c1"],
                        wolfe_c2=s["wolfe_c2"],
                        line_search=cfg["line_search"].get(stage, "wolfe"))


def apply_thread_limit(threads: int) -> None:
    """Cap BLAS/OpenMP pools; 0 leaves the environment untouched."""
    if threads <= 0:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)
