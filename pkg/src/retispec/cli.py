"""Command-line entry points.

Subcommands: decompose, render, gen-dataset, train, eval, grad-check, bench.
A JSON config file is the source of truth for pipeline options; individual
flags override single fields, and the final effective config is written next
to the outputs so every run is reproducible from its artifacts alone.

Exit codes: 0 success, 1 I/O or config, 2 geometry, 3 lighting fit,
4 internal.  Timing figures are printed to stdout only and never written to
artifact files, so reruns with the same seed are byte-identical.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .bench import (
    FAKE_MODES,
    GenerationSettings,
    evaluate,
    generate_dataset,
    load_manifest,
    make_procedural_albedo,
    run_speed_benchmark,
)
from .config import ConfigError, PipelineConfig
from .geometry import (
    Camera,
    GeometryError,
    load_obj,
    make_synthetic_face,
    rasterize,
)
from .illumination import FitError
from .nn import (
    OP_CHECK_BUILDERS,
    check_model_gradients,
    gradient_check,
    load_checkpoint,
    load_training_arrays,
    save_checkpoint,
    train,
)
from .pipeline import DecompositionError, decompose, export_decomposition
from .raster import Raster, RasterIOError, load_raster, save_raster
from .shading import ALL_COMPONENTS, PhongParams, render_buffers

EXIT_OK = 0
EXIT_IO = 1
EXIT_GEOMETRY = 2
EXIT_FIT = 3
EXIT_INTERNAL = 4

# Which pipeline stage maps to which exit code when decompose fails.
_STAGE_EXIT = {
    "geometry": EXIT_GEOMETRY,
    "flatten": EXIT_GEOMETRY,
    "texture": EXIT_FIT,
    "fit": EXIT_FIT,
    "split": EXIT_FIT,
    "specular": EXIT_FIT,
}

_PERTURBATIONS = ("none", "gaussian_blur", "jpeg_like", "gaussian_noise")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config(args):
    """Config file first, then per-flag overrides (flags default to None so
    only explicitly passed values win)."""
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_json(args.config)
    else:
        cfg = PipelineConfig()
    overrides = {
        "robust": getattr(args, "robust", None),
        "trim_fraction": getattr(args, "trim_fraction", None),
        "uv_resolution": getattr(args, "uv_resolution", None),
        "texture_source": getattr(args, "texture_source", None),
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out_dir", None),
    }
    for name, value in overrides.items():
        if value is not None:
            cfg = dataclasses.replace(cfg, **{name: value})
    train_overrides = {}
    for name in ("lr", "epochs", "batch_size", "mode", "channels",
                 "input_size", "feature_space"):
        value = getattr(args, name, None)
        if value is not None:
            train_overrides[name] = value
    if getattr(args, "learned_projections", False):
        train_overrides["learned_projections"] = True
    if getattr(args, "seed", None) is not None:
        train_overrides["seed"] = args.seed
    if train_overrides:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, **train_overrides))
    return cfg


def _write_effective_config(cfg, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_json(out_dir / "config.json")


# ---------------------------------------------------------------------------
# Geometry and scene loading
# ---------------------------------------------------------------------------

def _geometry_from_args(args):
    if getattr(args, "mesh", None):
        path = Path(args.mesh)
        if not path.exists():
            raise GeometryError(f"mesh file not found: {path}")
        return load_obj(path)
    return make_synthetic_face(radii=tuple(args.radii),
                               nose_amplitude=args.nose_amplitude,
                               resolution=args.face_resolution,
                               seed=args.face_seed)


def _scene_mesh(scene, base_dir):
    if "mesh" in scene:
        path = Path(scene["mesh"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise GeometryError(f"mesh file not found: {path}")
        return load_obj(path)
    face = dict(scene.get("synthetic_face", {}))
    known = {"radii", "nose_amplitude", "resolution", "seed"}
    unknown = set(face) - known
    if unknown:
        raise ConfigError(f"unknown synthetic_face keys: {sorted(unknown)}")
    if "radii" in face:
        face["radii"] = tuple(face["radii"])
    return make_synthetic_face(**face)


def _scene_texture(scene, base_dir):
    """Returns (constant_albedo, uv_texture); exactly one is non-None."""
    tex = scene.get("texture", {"kind": "constant", "value": [0.6, 0.5, 0.45]})
    kind = tex.get("kind", "constant")
    if kind == "constant":
        return np.asarray(tex.get("value", [0.6, 0.5, 0.45]), dtype=np.float64), None
    if kind == "procedural":
        return None, make_procedural_albedo(
            uv_resolution=tex.get("resolution", 64), seed=tex.get("seed", 0))
    if kind == "image":
        path = Path(tex["path"])
        if not path.is_absolute():
            path = base_dir / path
        return None, load_raster(path)
    raise ConfigError(f"unknown texture kind {kind!r}")


def load_scene(path):
    """Parse a render-scene JSON file; unknown top-level keys are rejected."""
    path = Path(path)
    try:
        with open(path) as fh:
            scene = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid scene JSON in {path}: {exc}")
    known = {"mesh", "synthetic_face", "size", "camera", "phong", "texture",
             "components", "background"}
    unknown = set(scene) - known
    if unknown:
        raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
    return scene


def _render_from_scene(scene, base_dir):
    mesh = _scene_mesh(scene, base_dir)
    size = scene.get("size", 256)
    if isinstance(size, (list, tuple)):
        width, height = int(size[0]), int(size[1])
    else:
        width = height = int(size)
    camera_spec = scene.get("camera", {})
    camera = Camera.from_view_dir(camera_spec.get("view_dir", (0.0, 0.0, 1.0)),
                                  scale=camera_spec.get("scale"),
                                  offset=camera_spec.get("offset"))
    params = PhongParams.from_dict(scene.get("phong", {}))
    albedo, uv_texture = _scene_texture(scene, base_dir)
    components = tuple(scene.get("components", ALL_COMPONENTS))
    buffers = rasterize(mesh, camera, width, height)
    image = render_buffers(buffers, params, albedo=albedo,
                           uv_texture=uv_texture, components=components,
                           background=scene.get("background", 0.0))
    return image, buffers, camera


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_decompose(args):
    cfg = _load_config(args)
    image = load_raster(args.image)
    mesh = _geometry_from_args(args)
    camera = Camera.from_view_dir(tuple(args.view_dir))
    provided = None
    if cfg.texture_source == "provided":
        if not args.albedo:
            raise ConfigError("--texture-source provided needs --albedo PATH")
        provided = load_raster(args.albedo)
    t0 = time.perf_counter()
    decomp = decompose(image, mesh, camera=camera,
                       retinex_config=cfg.retinex,
                       texture_source=cfg.texture_source,
                       provided_albedo=provided,
                       robust=cfg.robust, trim_fraction=cfg.trim_fraction,
                       uv_resolution=cfg.uv_resolution)
    elapsed = time.perf_counter() - t0
    out_dir = Path(cfg.out_dir)
    export_decomposition(decomp, out_dir)
    _write_effective_config(cfg, out_dir)
    print(f"decomposed {args.image} -> {out_dir}")
    for stage, seconds in decomp.meta["timings"].items():
        print(f"  {stage}: {seconds:.3f} s")
    print(f"  total: {elapsed:.3f} s")
    return EXIT_OK


def cmd_render(args):
    scene = load_scene(args.scene)
    image, buffers, _ = _render_from_scene(scene, Path(args.scene).parent)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_raster(image, out, clamp=True)
    if args.mask_out:
        save_raster(Raster(buffers.mask.astype(np.float64)[..., None]),
                    args.mask_out, clamp=True)
    covered = float(buffers.mask.mean())
    print(f"rendered {image.width}x{image.height} image to {out} "
          f"(mask coverage {covered:.3f})")
    return EXIT_OK


def cmd_gen_dataset(args):
    settings = GenerationSettings(image_size=args.image_size,
                                  uv_resolution=args.uv_resolution,
                                  face_resolution=args.face_resolution)
    weights = None
    if args.mode_weights:
        try:
            weights = json.loads(args.mode_weights)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid --mode-weights JSON: {exc}")
        unknown = set(weights) - set(FAKE_MODES)
        if unknown:
            raise ConfigError(f"unknown fake modes in --mode-weights: "
                              f"{sorted(unknown)}")
    t0 = time.perf_counter()
    entries = generate_dataset(args.out_dir, args.n_real, args.n_fake,
                               seed=args.seed, mode_weights=weights,
                               settings=settings)
    n_fake = sum(1 for e in entries if e.label == "fake")
    print(f"wrote {len(entries) - n_fake} real + {n_fake} fake samples to "
          f"{args.out_dir} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    samples, root, _ = load_manifest(args.manifest)
    entries = [{"image": str(root / s.image), "bundle": str(root / s.bundle),
                "label": s.label} for s in samples]
    arrays, labels = load_training_arrays(
        entries, input_size=cfg.train.input_size,
        feature_space=cfg.train.feature_space)
    t0 = time.perf_counter()
    result = train(arrays, labels, cfg.train)
    elapsed = time.perf_counter() - t0
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "model.ckpt", result["params"],
                    result["config"])
    with open(out_dir / "loss_curve.json", "w") as fh:
        json.dump({"loss_curve": result["loss_curve"],
                   "metrics": result["metrics"]}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    _write_effective_config(cfg, out_dir)
    print(f"trained {cfg.train.mode} model on {labels.shape[0]} samples "
          f"({cfg.train.epochs} epochs) in {elapsed:.1f} s")
    print(f"  final loss {result['metrics']['final_loss']:.4f}, "
          f"train accuracy {result['metrics']['train_accuracy']:.3f}")
    print(f"  checkpoint: {out_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    if args.detector == "model" and not args.checkpoint:
        raise ConfigError("--detector model needs --checkpoint PATH")
    t0 = time.perf_counter()
    report = evaluate(args.manifest, detector=args.detector,
                      perturbation=args.perturbation, seed=args.seed,
                      out_dir=args.out_dir, checkpoint=args.checkpoint)
    elapsed = time.perf_counter() - t0
    print(f"detector={report.detector} perturbation={report.perturbation} "
          f"auc={report.auc:.4f} ({report.n_real} real / {report.n_fake} "
          f"fake, {elapsed:.1f} s)")
    for mode in sorted(report.auc_per_mode):
        print(f"  {mode}: auc={report.auc_per_mode[mode]:.4f}")
    return EXIT_OK


def cmd_grad_check(args):
    ops = args.ops if args.ops else sorted(OP_CHECK_BUILDERS)
    unknown = set(ops) - set(OP_CHECK_BUILDERS)
    if unknown:
        raise ConfigError(f"unknown ops: {sorted(unknown)}")
    t0 = time.perf_counter()
    worst_overall = 0.0
    failed = False
    for name in ops:
        build, tensors = OP_CHECK_BUILDERS[name](args.seed)
        worst, failures = gradient_check(build, tensors, step=args.step,
                                         rtol=1e-5, seed=args.seed)
        ok = not failures
        failed = failed or not ok
        worst_overall = max(worst_overall, worst)
        print(f"  {name:<16} max rel err {worst:.3e}  "
              f"{'ok' if ok else 'FAIL'}")
    if not args.skip_model:
        worst, failures = check_model_gradients(seed=args.seed,
                                                step=args.step)
        ok = not failures
        failed = failed or not ok
        worst_overall = max(worst_overall, worst)
        print(f"  {'full model':<16} max rel err {worst:.3e}  "
              f"{'ok' if ok else 'FAIL'}")
    print(f"max relative error {worst_overall:.3e} "
          f"({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK if not failed else EXIT_INTERNAL


def cmd_bench(args):
    mesh = make_synthetic_face(resolution=args.face_resolution,
                               seed=args.seed)
    camera = Camera.from_view_dir((0.0, 0.0, 1.0))
    buffers = rasterize(mesh, camera, args.image_size, args.image_size)
    albedo = make_procedural_albedo(args.uv_resolution, seed=args.seed)
    params = PhongParams(light_dir=(0.3, 0.2, 0.933), exponent=32.0)
    image = render_buffers(buffers, params, uv_texture=albedo)
    result = run_speed_benchmark(image, buffers,
                                 uv_resolution=args.uv_resolution,
                                 k=args.k, iters=args.iters, seed=args.seed)
    print(f"retinex-constrained fit: {result['msr_seconds']:.3f} s")
    print(f"alternating pca fit (K={args.k}, {args.iters} iters): "
          f"{result['pca_seconds']:.3f} s")
    print(f"ratio (pca / retinex): {result['ratio']:.2f}x")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_face_args(p):
    p.add_argument("--mesh", help="OBJ mesh path (default: synthetic face)")
    p.add_argument("--face-resolution", type=int, default=48,
                   help="synthetic face grid resolution")
    p.add_argument("--face-seed", type=int, default=0,
                   help="synthetic face bump seed")
    p.add_argument("--radii", type=float, nargs=3,
                   default=(0.85, 1.0, 0.55), metavar=("RX", "RY", "RZ"),
                   help="synthetic face ellipsoid radii")
    p.add_argument("--nose-amplitude", type=float, default=0.18,
                   help="synthetic face nose bump height")
    p.add_argument("--view-dir", type=float, nargs=3,
                   default=(0.0, 0.0, 1.0), metavar=("X", "Y", "Z"),
                   help="camera view direction")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="retispec",
        description="Physics-guided face illumination decomposition and "
                    "specular-consistency forgery analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose",
                       help="decompose an image into texture, shading and "
                            "specular maps")
    p.add_argument("image", help="input image (PNG or PPM)")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out-dir", help="output bundle directory")
    p.add_argument("--texture-source", choices=("msr", "provided"))
    p.add_argument("--albedo", help="albedo image for --texture-source "
                                    "provided")
    p.add_argument("--robust", dest="robust", action="store_const",
                   const=True, default=None, help="trimmed lighting refit")
    p.add_argument("--no-robust", dest="robust", action="store_const",
                   const=False)
    p.add_argument("--trim-fraction", type=float)
    p.add_argument("--uv-resolution", type=int)
    _add_face_args(p)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("render", help="render a scene JSON to an image")
    p.add_argument("scene", help="scene JSON path")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--mask-out", help="optional coverage mask image path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gen-dataset",
                       help="generate a synthetic real/fake benchmark corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-real", type=int, required=True)
    p.add_argument("--n-fake", type=int, required=True)
    p.add_argument("--seed", type=int, required=True,
                   help="corpus seed (required: generation is stochastic)")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--uv-resolution", type=int, default=64)
    p.add_argument("--face-resolution", type=int, default=32)
    p.add_argument("--mode-weights",
                   help='JSON object of fake-mode weights, e.g. '
                        '\'{"wrong_exponent": 0.5, "scaled_specular": 0.5}\'')
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the two-stage attention detector")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out-dir", help="checkpoint output directory")
    p.add_argument("--seed", type=int, required=True,
                   help="training seed (required: init and batching are "
                        "stochastic)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mode", choices=("full", "concat", "image_only"))
    p.add_argument("--channels", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--feature-space", choices=("uv", "image"))
    p.add_argument("--learned-projections", action="store_true",
                   default=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a corpus and report ROC/AUC")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detector", default="baseline",
                   choices=("baseline", "model", "oracle", "random"))
    p.add_argument("--checkpoint", help="model checkpoint for --detector "
                                        "model")
    p.add_argument("--perturbation", default="none", choices=_PERTURBATIONS)
    p.add_argument("--seed", type=int, required=True,
                   help="eval seed (required: perturbations and the random "
                        "detector are stochastic)")
    p.add_argument("--out-dir", help="report output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check",
                       help="finite-difference check of every op and the "
                            "full model")
    p.add_argument("--ops", nargs="*", help="subset of ops (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--skip-model", action="store_true")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench",
                       help="compare retinex-constrained vs alternating-pca "
                            "fit wall time")
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--uv-resolution", type=int, default=128)
    p.add_argument("--face-resolution", type=int, default=48)
    p.add_argument("--k", type=int, default=16, help="pca basis size")
    p.add_argument("--iters", type=int, default=10,
                   help="pca alternating iterations")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DecompositionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _STAGE_EXIT.get(exc.stage, EXIT_INTERNAL)
    except GeometryError as exc:
        print(f"error: [geometry] {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except FitError as exc:
        print(f"error: [fit] {exc}", file=sys.stderr)
        return EXIT_FIT
    except (RasterIOError, ConfigError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
