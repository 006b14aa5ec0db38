"""Command-line entry points for training, capture stages, synthesis, eval.

Subcommands: train-model, fit-body, track, batch, wrinkles, run, synth, eval.
Every command takes --config (JSON file), repeated --set key=value overrides
and --threads (CLOTHCAP_THREADS as fallback); commands that write output take
--out and leave an effective_config.json there so the run can be reproduced
bit-identically. Exit codes: 0 success, 1 validation error, 2 runtime failure.

The stage commands (fit-body, track, batch, wrinkles) all drive the same
checkpointed orchestration: each runs the pipeline up to its stage and picks
up earlier stages from checkpoints already present in --out, so
`fit-body s -o out && track s -o out` equals `track s -o out` from scratch.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback

import numpy as np

from .body import load_body, BodyParams, PosedBody
from .clothing import load_model, train_model, save_model
from .config import (resolve, load_config, set_path, write_effective,
                     apply_thread_limit)
from .energy import load_gmm
from .errors import (ClothCapError, InvalidInputError, ManifestError,
                     UnfittableSequenceError)
from .measurements import load_sequence, export_results
from . import pipeline, synth


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _add_common(p, out_required=True):
    p.add_argument("--config", help="JSON file with config overrides")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="dotted config override, repeatable")
    p.add_argument("--out", "-o", required=out_required, help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="cap internal parallelism (env CLOTHCAP_THREADS)")


def _build_config(args):
    cfg = load_config(args.config) if args.config else resolve()
    for item in args.overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise InvalidInputError(f"--set needs KEY=VALUE, got {item!r}")
        set_path(cfg, key, value)
    threads = args.threads
    if threads is None and os.environ.get("CLOTHCAP_THREADS"):
        try:
            threads = int(os.environ["CLOTHCAP_THREADS"])
        except ValueError as e:
            raise InvalidInputError("CLOTHCAP_THREADS must be an integer") from e
    if threads is not None:
        cfg["threads"] = int(threads)
    cfg = resolve(cfg)  # re-validate after the raw --set edits
    apply_thread_limit(cfg["threads"])
    return cfg


def _load_tree(tree, need_models=True, body_path=None):
    """Open a sequence tree: manifest + body + garment models + prior."""
    seq = load_sequence(os.path.join(tree, "manifest.json"))
    body = load_body(body_path or os.path.join(tree, "body"))
    upper = lower = None
    if need_models:
        upper = load_model(os.path.join(tree, "models", "upper"))
        lower = load_model(os.path.join(tree, "models", "lower"))
    prior = None
    if os.path.isdir(os.path.join(tree, "prior")):
        prior = load_gmm(os.path.join(tree, "prior"))
    return seq, body, upper, lower, prior


def _run_stages(args, upto):
    """Shared driver for the stage commands; ``upto`` disables later stages."""
    cfg = _build_config(args)
    order = ["body", "track", "batch", "wrinkles"]
    for name in order[order.index(upto) + 1:]:
        cfg["stages"][name] = False
    need_models = upto != "body" and cfg["stages"].get("track", True)
    seq, body, upper, lower, prior = _load_tree(args.tree, need_models,
                                                getattr(args, "body", None))
    os.makedirs(args.out, exist_ok=True)
    write_effective(cfg, args.out)
    state = pipeline.run_pipeline(seq, body, upper, lower, cfg, prior=prior,
                                  out_dir=args.out)
    print(f"{upto}: wrote checkpoints under {args.out}")
    return state


def _cmd_fit_body(args):
    _run_stages(args, "body")
    return 0


def _cmd_track(args):
    _run_stages(args, "track")
    return 0


def _cmd_batch(args):
    _run_stages(args, "batch")
    return 0


def _cmd_wrinkles(args):
    _run_stages(args, "wrinkles")
    return 0


def _cmd_run(args):
    state = _run_stages(args, "wrinkles")
    export_results(state, os.path.join(args.out, "results"))
    return 0


def _cmd_train_model(args):
    cfg = _build_config(args)
    try:
        with np.load(args.samples) as data:
            clothed = np.asarray(data["clothed"], dtype=np.float64)
            body_rest = np.asarray(data["body"], dtype=np.float64)
            mask = np.asarray(data["mask"], dtype=bool)
    except (OSError, KeyError) as e:
        raise InvalidInputError(f"cannot read samples file {args.samples}: {e}") from e
    if body_rest.ndim == 2:
        body_rest = np.repeat(body_rest[None], len(clothed), axis=0)
    model = train_model(list(clothed), list(body_rest), mask, args.n_z,
                        args.garment_type, args.region)
    save_model(args.out, model)
    write_effective(cfg, args.out)
    print(f"trained {model.basis.shape[1]}-mode model on {len(clothed)} samples "
          f"-> {args.out}")
    return 0


def _cmd_synth(args):
    cfg = _build_config(args)
    spec = synth.SequenceSpec(seed=args.seed)
    if args.frames is not None:
        spec.n_frames = args.frames
    if args.size is not None:
        # Keep the field of view fixed as the image shrinks or grows.
        spec.focal *= args.size / spec.width
        spec.width = spec.height = args.size
    synth.emit_dataset(args.out, seed=args.seed, spec=spec,
                       n_vertices=args.n_vertices,
                       lower_garment=args.lower_garment)
    write_effective(cfg, args.out)
    print(f"synthetic sequence ({spec.n_frames} frames, "
          f"{spec.width}x{spec.height}) -> {args.out}")
    return 0


def _cmd_eval(args):
    cfg = _build_config(args)
    gt_path = os.path.join(args.gt, "gt", "ground_truth.npz")
    if not os.path.exists(gt_path):
        raise InvalidInputError(f"no ground truth at {gt_path}")
    gt = synth.load_ground_truth(gt_path)
    body = load_body(os.path.join(args.gt, "body"))
    upper = load_model(os.path.join(args.gt, "models", "upper"))
    lower = load_model(os.path.join(args.gt, "models", "lower"))
    fit = pipeline._read_body_checkpoint(os.path.join(args.pred, "body"))
    if fit is None:
        raise InvalidInputError(f"no body checkpoint under {args.pred}")

    stage = args.stage
    if stage == "body":
        meshes = [body.mesh(PosedBody(body, BodyParams(
            fit.beta, fit.thetas[i], fit.translations[i])).vertices)
            for i in range(len(fit.thetas))]
    else:
        loaded = None
        stages = ("batch", "track") if stage == "auto" else (stage,)
        for name in stages:
            loaded = pipeline._read_z_checkpoint(os.path.join(args.pred, name))
            if loaded is not None:
                stage = name
                break
        if loaded is None:
            raise InvalidInputError(f"no {'/'.join(stages)} checkpoint under {args.pred}")
        zu, zl = loaded
        meshes = pipeline._clothed_meshes(body, fit, upper, lower, zu, zl)

    joints_pred = np.array([
        PosedBody(body, BodyParams(fit.beta, fit.thetas[i],
                                   fit.translations[i])).posed_joints
        + fit.translations[i] for i in range(len(fit.thetas))])
    joint_err = [synth.eval_joint_error(gt.joints[i], joints_pred[i])
                 for i in range(len(joints_pred))]
    surf_err = [synth.eval_surface_error(gt.clothed_vertices[i], meshes[i])
                for i in range(len(meshes))]

    out = args.out or args.pred
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "metrics.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "surface_error_mm", "joint_error_mm"])
        for i, (s, j) in enumerate(zip(surf_err, joint_err)):
            writer.writerow([i, repr(float(s)), repr(float(j))])
    write_effective(cfg, out)
    print(f"stage {stage}: mean surface error {np.mean(surf_err):.2f} mm, "
          f"mean joint error {np.mean(joint_err):.2f} mm -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="clothcap",
                  description="Monocular clothing capture pipeline")
    sub = top.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train-model", parents=[], help="fit a garment deformation subspace")
    p.add_argument("samples", help="npz with clothed (S,N,3), body (N,3) and mask (N,)")
    p.add_argument("--n-z", type=int, required=True, help="subspace dimension")
    p.add_argument("--garment-type", required=True,
                   choices=["tshirt", "shorts", "pants"])
    p.add_argument("--region", required=True, choices=["upper", "lower"])
    _add_common(p)
    p.set_defaults(func=_cmd_train_model)

    for name, fn, text in [
            ("fit-body", _cmd_fit_body, "fit shape, pose and focal length"),
            ("track", _cmd_track, "sequential clothing tracking with texture growing"),
            ("batch", _cmd_batch, "joint temporal refinement of clothing coefficients"),
            ("wrinkles", _cmd_wrinkles, "normal-map wrinkle extraction"),
            ("run", _cmd_run, "all stages end to end")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("tree", help="sequence directory (manifest.json inside)")
        p.add_argument("--body", help="body model directory (default: tree/body)")
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("synth", help="generate a synthetic closed-loop dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="square image size")
    p.add_argument("--n-vertices", type=int, default=2000)
    p.add_argument("--lower-garment", default="pants", choices=["pants", "shorts"])
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", help="per-frame surface/joint error against ground truth")
    p.add_argument("--pred", required=True, help="pipeline output directory")
    p.add_argument("--gt", required=True, help="synthetic dataset directory")
    p.add_argument("--stage", default="auto", choices=["auto", "body", "track", "batch"])
    _add_common(p, out_required=False)
    p.set_defaults(func=_cmd_eval)

    return top


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (InvalidInputError, ManifestError, UnfittableSequenceError,
            FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ClothCapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
