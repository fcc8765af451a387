"""Command-line driver for the reconstruction pipeline.

Every subcommand writes its artifacts into ``--out`` together with a
``manifest.json`` describing the effective configuration. Exit status is 0 on
success, 1 on a usage error and 2 when the pipeline itself fails.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import BACKEND, default_threads
from .eval_metrics import MetricReport, chamfer_hausdorff, image_report
from .level_set import EmptyCloudError, LevelSetConfig
from .mesh import MeshError, load_mesh, save_mesh
from .ply import PlyFormatError
from .poisson_mesh import PoissonError, extract_mesh
from .regularizer import TrainConfig, TrainingDivergedError, train
from .scene_io import (AnalyticSurface, CameraValidationError, EmptySceneError, SyntheticSpec,
                       clean_spec, load_cameras, load_gaussian_ply, make_synthetic_scene,
                       save_cameras, save_gaussian_ply, synthetic_cameras)
from .splat_render import RenderSettings, load_png, render_image, save_png
from .surface_bind import BoundScene, RefineConfig, bind_gaussians, refine, render_bound

log = logging.getLogger("gausssurf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# Errors that mean "the inputs or the pipeline failed", as opposed to a bad command line.
RUNTIME_ERRORS = (EmptyCloudError, PoissonError, MeshError, PlyFormatError, EmptySceneError,
                  CameraValidationError, TrainingDivergedError, OSError, ValueError, KeyError)

DEFAULTS: dict[str, dict] = {
    "synth": {"surface": "sphere", "radius": 1.0, "extents": [1.6, 1.2, 1.0], "n_gaussians": 5000,
              "noise": 0.02, "n_cameras": 24, "image_size": 64, "n_heldout": 6, "sh_degree": 0},
    "train": {"iters_free": 0, "iters_entropy": 0, "iters": 2000, "n_reg_points": 1000},
    "extract-mesh": {"lambda": 0.3, "grid": 128, "target_verts": 200000, "rays_per_view": 2000},
    "bind": {"n_per_tri": None},     # 6, or 1 for meshes above 200k vertices
    "refine": {"iters": 2000, "checkpoints": 2},
    "render": {},
    "eval": {"n_samples": 20000},
}
COMMON_DEFAULTS = {"seed": 0, "out": "."}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# configuration

def load_config(path) -> dict:
    """Read a TOML or JSON config file into a flat dict of option names."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file (top level and the ``[command]`` table), then flags."""
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(DEFAULTS[command])
    if getattr(args, "config", None):
        raw = load_config(args.config)
        section = raw.get(command, {})
        flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
        for src in (flat, section):
            cfg.update({k.replace("-", "_"): v for k, v in src.items()})
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "func", "verbose")}
    cfg.update(flags)
    threads = cfg.get("threads")
    cfg["threads"] = int(threads) if threads is not None else default_threads()
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of everything that can change the artifacts (the output folder cannot)."""
    blob = json.dumps({k: v for k, v in cfg.items() if k != "out"}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _versions() -> dict:
    import scipy

    return {"gausssurf": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "backend": BACKEND}


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[Path], timings: dict) -> Path:
    missing = [str(p) for p in outputs if not Path(p).exists()]
    if missing:
        raise OSError(f"expected outputs were not written: {', '.join(missing)}")
    manifest = {"command": command, "config": cfg, "config_hash": config_hash(cfg), "seed": cfg["seed"],
                "versions": _versions(), "timings": timings,
                "outputs": sorted(os.path.relpath(p, out) for p in outputs)}
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# helpers

def _settings(cfg) -> RenderSettings:
    return RenderSettings(threads=cfg["threads"])


def _need(cfg, *names):
    for n in names:
        if cfg.get(n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_images(folder) -> list[np.ndarray]:
    files = sorted(Path(folder).glob("*.png"))
    if not files:
        raise OSError(f"no PNG images in {folder}")
    return [load_png(f) for f in files]


def save_images(images, folder: Path, prefix: str = "view") -> list[Path]:
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(images):
        p = folder / f"{prefix}_{i:03d}.png"
        save_png(im, p)
        paths.append(p)
    return paths


def _load_aligned(cfg):
    cams = load_cameras(cfg["cameras"])
    images = load_images(cfg["images"])
    if len(images) != len(cams):
        raise ValueError(f"{len(images)} images but {len(cams)} cameras")
    return images, cams


# ---------------------------------------------------------------------------
# subcommands; each returns the list of files it wrote

def cmd_synth(cfg, out: Path) -> list[Path]:
    if cfg["surface"] == "sphere":
        params = {"radius": float(cfg["radius"])}
    elif cfg["surface"] == "box":
        params = {"extents": [float(x) for x in cfg["extents"]]}
    else:
        params = {}
    spec = SyntheticSpec(surface=cfg["surface"], params=params, n_gaussians=int(cfg["n_gaussians"]),
                         noise=float(cfg["noise"]), seed=int(cfg["seed"]), n_cameras=int(cfg["n_cameras"]),
                         image_size=int(cfg["image_size"]), sh_degree=int(cfg["sh_degree"]))
    scene, cams, surface = make_synthetic_scene(spec)
    clean, _, _ = make_synthetic_scene(clean_spec(spec))
    settings = _settings(cfg)
    written = [out / "scene.ply", out / "cameras.json", out / "gt.json"]
    save_gaussian_ply(scene, written[0])
    save_cameras(cams, written[1])
    _write_json(written[2], {"surface": surface.to_dict(), "spec": asdict(spec)})
    written += save_images([render_image(clean, c, settings) for c in cams], out / "images")
    if cfg["n_heldout"] > 0:
        # offset ring of views never used for training
        held = synthetic_cameras(surface, int(cfg["n_heldout"]), spec.image_size, spec.camera_distance * 1.1)
        save_cameras(held, out / "heldout_cameras.json")
        written.append(out / "heldout_cameras.json")
        written += save_images([render_image(clean, c, settings) for c in held], out / "heldout_images")
    return written


def cmd_train(cfg, out: Path) -> list[Path]:
    _need(cfg, "scene", "cameras", "images")
    scene = load_gaussian_ply(cfg["scene"])
    images, cams = _load_aligned(cfg)
    tc = TrainConfig(iters_free=int(cfg["iters_free"]), iters_entropy=int(cfg["iters_entropy"]),
                     iters_reg=int(cfg["iters"]), n_reg_points=int(cfg["n_reg_points"]),
                     seed=int(cfg["seed"]), render=_settings(cfg))
    history: list = []
    trained = train(scene, images, cams, tc, history)
    written = [out / "trained.ply", out / "train_history.json"]
    save_gaussian_ply(trained, written[0])
    _write_json(written[1], history)
    return written


def cmd_extract(cfg, out: Path) -> list[Path]:
    _need(cfg, "scene", "cameras")
    scene = load_gaussian_ply(cfg["scene"])
    cams = load_cameras(cfg["cameras"])
    lc = LevelSetConfig(lam=float(cfg["lambda"]), n_rays_per_view=int(cfg["rays_per_view"]),
                        seed=int(cfg["seed"]), render=_settings(cfg))
    res = extract_mesh(scene, cams, lc, res=int(cfg["grid"]), target_vertices=int(cfg["target_verts"]))
    written = [out / "mesh.ply", out / "extract.json"]
    save_mesh(res.mesh, written[0])
    _write_json(written[1], res.metadata)
    return written


def cmd_bind(cfg, out: Path) -> list[Path]:
    _need(cfg, "mesh")
    mesh = load_mesh(cfg["mesh"])
    init = load_gaussian_ply(cfg["scene"]) if cfg.get("scene") else None
    n = cfg["n_per_tri"]
    bs = bind_gaussians(mesh, int(n) if n is not None else None, init_scene=init)
    bs.save(out / "bound")
    return [out / "bound.mesh.ply", out / "bound.bound.bin", out / "bound.bound.json"]


def cmd_refine(cfg, out: Path) -> list[Path]:
    _need(cfg, "bound", "cameras", "images")
    bs = BoundScene.load(cfg["bound"])
    images, cams = _load_aligned(cfg)
    heldout = None
    if cfg.get("heldout_cameras") and cfg.get("heldout_images"):
        hc = load_cameras(cfg["heldout_cameras"])
        heldout = (load_images(cfg["heldout_images"]), hc)
    rc = RefineConfig(iters=int(cfg["iters"]), seed=int(cfg["seed"]), checkpoints=int(cfg["checkpoints"]),
                      render=_settings(cfg))
    history: list = []
    refined = refine(bs, images, cams, rc, heldout=heldout, history=history)
    refined.save(out / "refined")
    written = [out / "refined.mesh.ply", out / "refined.bound.bin", out / "refined.bound.json",
               out / "refined_flat.ply", out / "refine_history.json"]
    save_gaussian_ply(refined.to_scene(), written[3])
    _write_json(written[4], history)
    return written


def _renderer(cfg):
    settings = _settings(cfg)
    if cfg.get("bound"):
        bs = BoundScene.load(cfg["bound"])
        return lambda cam: render_bound(bs, cam, settings).image
    _need(cfg, "scene")
    scene = load_gaussian_ply(cfg["scene"])
    return lambda cam: render_image(scene, cam, settings)


def cmd_render(cfg, out: Path) -> list[Path]:
    _need(cfg, "cameras")
    draw = _renderer(cfg)
    return save_images([draw(c) for c in load_cameras(cfg["cameras"])], out / "renders")


def cmd_eval(cfg, out: Path) -> list[Path]:
    report = MetricReport(config={k: v for k, v in cfg.items() if k != "out"})
    if cfg.get("mesh"):
        _need(cfg, "gt")
        with open(cfg["gt"]) as fh:
            surface = AnalyticSurface.from_dict(json.load(fh)["surface"])
        t0 = time.perf_counter()
        ch, hd = chamfer_hausdorff(load_mesh(cfg["mesh"]), surface, int(cfg["n_samples"]), seed=int(cfg["seed"]))
        report.geometry = {"chamfer": ch, "hausdorff": hd}
        report.timings["geometry"] = time.perf_counter() - t0
    if cfg.get("scene") or cfg.get("bound"):
        images, cams = _load_aligned(cfg)
        draw = _renderer(cfg)
        t0 = time.perf_counter()
        report.views = image_report([draw(c) for c in cams], images)
        report.timings["images"] = time.perf_counter() - t0
    if not report.views and not report.geometry:
        raise UsageError("eval needs --mesh with --gt, or --scene/--bound with --cameras and --images")
    # timings vary run to run; keep them out of the byte-compared report
    timings, report.timings = report.timings, {}
    written = [out / "report.json", out / "report.csv"]
    report.write_json(written[0])
    report.write_csv(written[1])
    report.timings = timings
    return written


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "extract-mesh": cmd_extract, "bind": cmd_bind,
            "refine": cmd_refine, "render": cmd_render, "eval": cmd_eval}


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS   # unset flags stay absent so config files can supply them
    common = _Parser(add_help=False, argument_default=S)
    common.add_argument("--config", help="TOML or JSON file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (default: $GAUSSSURF_THREADS or 1)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=False)

    p = _Parser(prog="gausssurf", description="Surface-aligned Gaussian splatting on the CPU.")
    p.add_argument("--version", action="version", version=f"gausssurf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], argument_default=S, help="generate a synthetic scene")
    s.add_argument("--surface", choices=["sphere", "box", "plane"])
    s.add_argument("--radius", type=float)
    s.add_argument("--extents", type=float, nargs=3)
    s.add_argument("--n-gaussians", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--n-cameras", type=int)
    s.add_argument("--image-size", type=int)
    s.add_argument("--n-heldout", type=int)
    s.add_argument("--sh-degree", type=int)

    t = sub.add_parser("train", parents=[common], argument_default=S, help="regularized optimization")
    t.add_argument("--scene")
    t.add_argument("--cameras")
    t.add_argument("--images")
    t.add_argument("--iters", type=int, help="regularized iterations")
    t.add_argument("--iters-free", type=int)
    t.add_argument("--iters-entropy", type=int)
    t.add_argument("--n-reg-points", type=int)

    e = sub.add_parser("extract-mesh", parents=[common], argument_default=S, help="level set + Poisson + QEM")
    e.add_argument("--scene")
    e.add_argument("--cameras")
    e.add_argument("--lambda", type=float)
    e.add_argument("--grid", type=int)
    e.add_argument("--target-verts", type=int)
    e.add_argument("--rays-per-view", type=int)

    b = sub.add_parser("bind", parents=[common], argument_default=S, help="bind flat Gaussians to a mesh")
    b.add_argument("--mesh")
    b.add_argument("--scene", help="optional Gaussian scene to initialize colors from")
    b.add_argument("--n-per-tri", type=int, choices=[1, 3, 6])

    r = sub.add_parser("refine", parents=[common], argument_default=S, help="joint mesh/Gaussian refinement")
    r.add_argument("--bound", help="prefix of a bound scene (PREFIX.bound.json)")
    r.add_argument("--cameras")
    r.add_argument("--images")
    r.add_argument("--heldout-cameras")
    r.add_argument("--heldout-images")
    r.add_argument("--iters", type=int)
    r.add_argument("--checkpoints", type=int)

    v = sub.add_parser("render", parents=[common], argument_default=S, help="render a scene to PNGs")
    v.add_argument("--scene")
    v.add_argument("--bound")
    v.add_argument("--cameras")

    m = sub.add_parser("eval", parents=[common], argument_default=S, help="image and geometry metrics")
    m.add_argument("--mesh")
    m.add_argument("--gt", help="gt.json written by synth")
    m.add_argument("--scene")
    m.add_argument("--bound")
    m.add_argument("--cameras")
    m.add_argument("--images")
    m.add_argument("--n-samples", type=int)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:   # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    try:
        cfg = effective_config(command, args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        outputs = COMMANDS[command](cfg, out)
        write_manifest(out, command, cfg, outputs, {"total_s": time.perf_counter() - t0})
    except UsageError as exc:
        sys.stderr.write(f"gausssurf {command}: error: {exc}\n")
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        sys.stderr.write(f"gausssurf {command}: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
