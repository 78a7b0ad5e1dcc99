"""Command-line entry point: ``advtex {gen2d,gen3d,optimize,evaluate,render}``.

Progress goes to stderr; results are written to files. Thread count for the
numeric backend can be set with ``ADVTEX_NUM_THREADS``; ``--deterministic``
forces a single thread.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .geometry import THETA_Z_OBJECT, THETA_Z_SCENE, Camera, GeometryError
from .io import (FormatError, ensure_dir, load_dataset, read_camera, read_obj, read_png, save_2d_dataset,
                 save_3d_dataset, write_depth, write_png, write_tensors)
from .metrics import evaluate
from .optim import HISTORY_FIELDS, OptimConfig, optimize_texture
from .raster import render_textured_mesh
from .synth import (PerturbationSpec, make_2d_dataset, make_3d_dataset, make_heightfield_mesh, make_pattern_image,
                    sample_hemisphere_views)

log = logging.getLogger("advtex")

# per-command defaults; --config files use the same keys
OPTIMIZE_DEFAULTS = {
    "steps": 10000, "seed": 0, "l1_only": False, "frame_stride": 1, "texture_size": None,
    "lambda0": 10.0, "lambda_decay": 0.8, "lambda_interval": 1000, "lr_texture": 1e-3,
    "lr_disc": 1e-4, "theta_z": None, "disc_widths": "64,128,256,512", "snapshot_every": 1000,
    "deterministic": False,
}
GEN2D_DEFAULTS = {"input": None, "size": 128, "num": 16, "max_shift": 16, "seed": 0}
GEN3D_DEFAULTS = {
    "mesh": None, "texture": None, "level": 4, "radius": 2.0, "image_size": 128, "fov": 45.0,
    "severity": None, "e_t": 0.0, "e_a": 0.0, "e_g": 0.0, "camera_only": False, "geometry_only": False,
    "texture_size": 128, "preset": "object", "theta_z": None, "seed": 0,
}
EVALUATE_DEFAULTS = {"generated": None, "reference": None, "patch": 7, "window": 24}
RENDER_DEFAULTS = {"mesh": None, "texture": None, "cameras": None}
DEFAULTS = {"gen2d": GEN2D_DEFAULTS, "gen3d": GEN3D_DEFAULTS, "optimize": OPTIMIZE_DEFAULTS,
            "evaluate": EVALUATE_DEFAULTS, "render": RENDER_DEFAULTS}


def build_parser():
    p = argparse.ArgumentParser(prog="advtex", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"advtex {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON file with parameter values; flags override it")
        sp.add_argument("--out", required=out_required, help="output directory (or file for evaluate)")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("gen2d", help="2D micro-translation dataset")
    common(g)
    g.add_argument("--input", help="ground-truth PNG (default: procedural pattern)")
    g.add_argument("--size", type=int, help="procedural image size")
    g.add_argument("--num", type=int, help="number of observations")
    g.add_argument("--max-shift", type=int, help="translations drawn from [-s, s]^2")
    g.add_argument("--seed", type=int)

    g = sub.add_parser("gen3d", help="perturbed virtual scan of a textured mesh")
    common(g)
    g.add_argument("--mesh", help="OBJ with uvs (default: procedural height field)")
    g.add_argument("--texture", help="texture PNG (default: procedural pattern)")
    g.add_argument("--level", type=int, help="icosahedron subdivision level for views")
    g.add_argument("--radius", type=float)
    g.add_argument("--image-size", type=int)
    g.add_argument("--fov", type=float, help="horizontal field of view in degrees")
    g.add_argument("--severity", type=float, help="n: e_t=0.01*1.5^n, e_a=5deg, e_g=0.02*1.5^n")
    g.add_argument("--e-t", type=float, help="translation noise bound (m)")
    g.add_argument("--e-a", type=float, help="rotation noise bound (degrees)")
    g.add_argument("--e-g", type=float, help="geometry noise bound (m)")
    g.add_argument("--camera-only", action="store_true", default=None)
    g.add_argument("--geometry-only", action="store_true", default=None)
    g.add_argument("--texture-size", type=int)
    g.add_argument("--preset", choices=("object", "scene"), help="occlusion threshold preset")
    g.add_argument("--theta-z", type=float)
    g.add_argument("--seed", type=int)

    g = sub.add_parser("optimize", help="optimize a texture for a dataset")
    common(g)
    g.add_argument("--dataset", required=True)
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--l1-only", action="store_true", default=None, help="disable the adversarial term")
    g.add_argument("--frame-stride", type=int, help="keep every k-th view")
    g.add_argument("--texture-size", type=int)
    g.add_argument("--lambda0", type=float)
    g.add_argument("--lambda-decay", type=float)
    g.add_argument("--lambda-interval", type=int)
    g.add_argument("--lr-texture", type=float)
    g.add_argument("--lr-disc", type=float)
    g.add_argument("--theta-z", type=float)
    g.add_argument("--disc-widths", help="comma-separated widths of the four hidden blocks")
    g.add_argument("--snapshot-every", type=int)
    g.add_argument("--deterministic", action="store_true", default=None, help="single-threaded bitwise mode")

    g = sub.add_parser("evaluate", help="patch metrics of an image against a reference")
    common(g, out_required=False)
    g.add_argument("--generated", required=True)
    g.add_argument("--reference", required=True)
    g.add_argument("--patch", type=int)
    g.add_argument("--window", type=int)

    g = sub.add_parser("render", help="render a textured mesh from cameras")
    common(g)
    g.add_argument("--mesh", required=True)
    g.add_argument("--texture", required=True)
    g.add_argument("--cameras", required=True, help="camera JSON, JSON list of cameras, or a directory of them")
    return p


def effective_config(args):
    """Defaults, then --config values, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        with open(args.config) as f:
            loaded = json.load(f)
        unknown = set(loaded) - set(cfg) - {"out", "dataset"}
        if unknown:
            raise ValueError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        cfg[key] = value
    return cfg


def echo_config(out_dir, command, cfg):
    out_dir = ensure_dir(out_dir)
    stamp = {"command": command, "version": __version__, "config": cfg}
    with open(out_dir / "config.json", "w") as f:
        json.dump(stamp, f, indent=2, sort_keys=True)


def cmd_gen2d(cfg):
    gt = read_png(cfg["input"]) if cfg["input"] else make_pattern_image(cfg["size"], cfg["seed"])
    obs = make_2d_dataset(gt, cfg["num"], cfg["max_shift"], cfg["seed"])
    save_2d_dataset(cfg["out"], obs, ground_truth=gt, seed=cfg["seed"], extra={"max_shift": cfg["max_shift"]})
    log.info("wrote %d observations to %s", len(obs), cfg["out"])


def cmd_gen3d(cfg):
    seed = cfg["seed"]
    mesh = read_obj(cfg["mesh"]) if cfg["mesh"] else make_heightfield_mesh(seed=seed)
    texture = read_png(cfg["texture"]) if cfg["texture"] else make_pattern_image(cfg["texture_size"], seed)
    if cfg["severity"] is not None:
        spec = PerturbationSpec.from_severity(cfg["severity"], seed=seed, camera=not cfg["geometry_only"],
                                              geometry=not cfg["camera_only"])
    else:
        spec = PerturbationSpec(0.0, cfg["e_t"], cfg["e_a"], cfg["e_g"], seed)
    cams = sample_hemisphere_views(cfg["level"], cfg["radius"], width=cfg["image_size"],
                                   height=cfg["image_size"], fov_degrees=cfg["fov"])
    theta_z = cfg["theta_z"] if cfg["theta_z"] is not None else (
        THETA_Z_OBJECT if cfg["preset"] == "object" else THETA_Z_SCENE)
    log.info("rendering %d views", len(cams))
    scan = make_3d_dataset(mesh, texture, cams, spec)
    save_3d_dataset(cfg["out"], scan, texture.shape[0], theta_z, seed)
    log.info("wrote dataset to %s", cfg["out"])


def _optim_config(cfg, manifest):
    widths = cfg["disc_widths"]
    if isinstance(widths, str):
        widths = [int(w) for w in widths.split(",")]
    return OptimConfig(
        total_steps=cfg["steps"], lambda0=cfg["lambda0"], lambda_decay=cfg["lambda_decay"],
        lambda_interval=cfg["lambda_interval"], lr_texture=cfg["lr_texture"], lr_discriminator=cfg["lr_disc"],
        texture_size=cfg["texture_size"] or manifest.texture_size,
        theta_z=cfg["theta_z"] if cfg["theta_z"] is not None else manifest.theta_z,
        seed=cfg["seed"], frame_stride=cfg["frame_stride"], adversarial=not cfg["l1_only"],
        disc_widths=widths, snapshot_every=cfg["snapshot_every"])


def cmd_optimize(cfg):
    out = ensure_dir(cfg["out"])
    data = load_dataset(cfg["dataset"])
    config = _optim_config(cfg, data.manifest)
    snaps = ensure_dir(out / "snapshots")
    csv_path = out / "loss.csv"
    with open(csv_path, "w", newline="") as f:
        csv.writer(f).writerow(HISTORY_FIELDS)
    written = [0]
    t0 = time.time()

    def on_snapshot(step, texture, history):
        write_png(snaps / f"step_{step:06d}.png", texture.to_image())
        with open(csv_path, "a", newline="") as f:
            w = csv.writer(f)
            for row in history[written[0]:]:
                w.writerow([repr(row[k]) for k in HISTORY_FIELDS])
        written[0] = len(history)
        last = history[-1]
        log.info("step %d/%d  lambda=%.4g  L1=%.4f  G=%.4f  D=%.4f/%.4f  (%.0fs)", step, config.total_steps,
                 last["lambda"], last["loss_L1"], last["loss_G_adv"], last["loss_D_real"], last["loss_D_fake"],
                 time.time() - t0)

    result = optimize_texture(data.views, config, on_snapshot=on_snapshot)
    write_png(out / "texture.png", result.texture.to_image())
    if result.discriminator is not None:
        write_tensors(out / "discriminator.atc", result.discriminator.state_dict())
    with open(out / "run.json", "w") as f:
        json.dump({"version": __version__, "seed": config.seed, "steps": config.total_steps,
                   "optim_config": config.to_dict(), "dataset": str(data.root),
                   "views_used": len(data.views[::config.frame_stride])}, f, indent=2)
    if read_png(out / "texture.png").shape[:2] != result.texture.image.shape[1:]:
        raise FormatError(out / "texture.png", 0, "dimensions", "written texture failed to read back")


def cmd_evaluate(cfg):
    gen = read_png(cfg["generated"])
    ref = read_png(cfg["reference"])
    report = evaluate(gen, ref, cfg["patch"], cfg["window"])
    out = cfg.get("out") or "metrics.json"
    out_path = Path(out)
    if out_path.is_dir():
        out_path = out_path / "metrics.json"
    out_path.write_text(report.to_json())
    print(report.table())


def _load_cameras(path):
    path = Path(path)
    if path.is_dir():
        return [read_camera(p) for p in sorted(path.glob("*.json"))]
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, list):
        return [Camera.from_dict(d) for d in data]
    return [Camera.from_dict(data)]


def cmd_render(cfg):
    out = ensure_dir(cfg["out"])
    mesh = read_obj(cfg["mesh"])
    texture = read_png(cfg["texture"])
    cams = _load_cameras(cfg["cameras"])
    if not cams:
        raise ValueError(f"no cameras found in {cfg['cameras']}")
    for i, cam in enumerate(cams):
        color, depth, _, _ = render_textured_mesh(mesh, texture, cam)
        write_png(out / f"{i:04d}.color.png", color)
        write_depth(out / f"{i:04d}.depth.f32", depth)
    log.info("rendered %d views to %s", len(cams), out)


COMMANDS = {"gen2d": cmd_gen2d, "gen3d": cmd_gen3d, "optimize": cmd_optimize,
            "evaluate": cmd_evaluate, "render": cmd_render}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = effective_config(args)
        if args.command != "evaluate":
            echo_config(cfg["out"], args.command, cfg)
        threads = 1 if cfg.get("deterministic") else os.environ.get("ADVTEX_NUM_THREADS")
        limit = threadpool_limits(int(threads)) if threads else contextlib.nullcontext()
        with limit:
            COMMANDS[args.command](cfg)
    except (FormatError, GeometryError, ValueError, OSError) as e:
        print(f"advtex {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
