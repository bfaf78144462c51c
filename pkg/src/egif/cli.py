"""``egif`` command-line interface.

Exit codes: 0 success, 1 invalid input, 2 non-finite loss, 3 audit failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .audit import CLASSES, audit, default_probe, report
from .config import ConfigError, RunConfig, load_config
from .fileio import FormatError, read_cloud, write_obj, write_xyz
from .geometry import GeometryError, as_cloud, random_transform
from .implicitnet import MODES
from .recon import eval_reconstruction, evaluate_grid, marching_cubes
from .shapes import FAMILIES, ShapeSpec, random_shape, synth_shape
from .training import TrainingDiverged, format_metrics_csv, train

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_AUDIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 (argparse would use 2, which means divergence here)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _threads(args) -> int:
    env = os.environ.get("EGIF_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"EGIF_THREADS must be an integer, got {env!r}") from None
    else:
        n = args.threads
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
        if args.mode == "plain" or cfg.training.mode == "plain":
            changes.update(hidden_h=None, hidden_v=None)
    if args.k is not None:
        changes["k"] = args.k
    return cfg.with_training(**changes) if changes else cfg


def _load_checkpoint(args):
    theta, header = checkpoint.load(args.checkpoint)
    if args.mode is not None and args.mode != theta.mode and args.command != "audit":
        raise UsageError(f"checkpoint is a {theta.mode} model, --mode says {args.mode}")
    if args.k is not None and args.k != theta.config.k:
        raise UsageError(f"checkpoint uses k={theta.config.k}, --k says {args.k}")
    return theta, header


def _out(args, default: str) -> Path:
    return Path(args.out if args.out else default)


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _run_config(args)
    tcfg = cfg.training
    tcfg = replace(tcfg, threads=min(_threads(args), tcfg.clouds_per_step))
    out = _out(args, "run")
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(tcfg, progress=lambda r: print(f"step {r['step']}: loss {r['loss']:.4f} val_iou {r['val_iou']:.4f}", file=sys.stderr))
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    checkpoint.save(out / "model.egif", result.theta, tcfg.seed, tcfg.iterations)
    (out / "metrics.csv").write_text(format_metrics_csv(result.metrics))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for flag in result.flags:
        print(f"warning: {flag}", file=sys.stderr)
    print(f"wrote {out / 'model.egif'} and {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    theta, _ = _load_checkpoint(args)
    X = as_cloud(read_cloud(args.cloud))
    cfg = load_config(args.config) if args.config else RunConfig()
    grid = evaluate_grid(X, theta, args.resolution, cfg.bounds, threads=_threads(args))
    mesh = marching_cubes(grid, args.tau)
    out = _out(args, "mesh.obj")
    write_obj(out, mesh.vertices, mesh.triangles)
    if mesh.is_empty:
        print(f"warning: field never crosses tau={args.tau}; wrote an empty mesh", file=sys.stderr)
    print(f"vertices {mesh.vertices.shape[0]} faces {mesh.triangles.shape[0]}")
    return EXIT_OK


def cmd_audit(args) -> int:
    theta, _ = _load_checkpoint(args)
    if args.cloud:
        X = as_cloud(read_cloud(args.cloud))
        q = np.random.default_rng(args.seed or 0).uniform(-0.5, 0.5, size=(args.queries, 3))
    else:
        X, q = default_probe(args.seed or 0, n_queries=args.queries)
    results = audit(theta, X, q, args.n_transforms, args.tolerance, args.seed or 0, claimed_mode=args.mode, classes=args.classes)
    rep = report(results)
    text = json.dumps(rep, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    for r in results:
        lane = "claimed" if r.claimed else "informational"
        status = "pass" if r.passed else "FAIL" if r.claimed else "deviates"
        print(f"{r.mode} {r.cls:<11} n={r.n:<4} max_abs_dev={r.max_abs_dev:.3e} {status} ({lane})")
    if not rep["ok"]:
        print(json.dumps(rep["failures"], sort_keys=True), file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.count < 0 or args.n_surface < 1:
        raise UsageError("--count must be >= 0 and --n-surface >= 1")
    out = _out(args, "data")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed or 0)
    for i in range(args.count):
        spec = random_shape(rng, args.family, args.max_primitives)
        X, _ = synth_shape(spec, rng, args.n_surface, args.noise_sd)
        write_xyz(out / f"shape_{i:04d}.xyz", X)
        (out / f"shape_{i:04d}.json").write_text(spec.to_json() + "\n")
    print(f"wrote {args.count} shapes to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    theta, _ = _load_checkpoint(args)
    data = Path(args.data)
    specs = sorted(data.glob("shape_*.json"))
    if not specs:
        raise UsageError(f"no shape_*.json files in {data}")
    rng = np.random.default_rng(args.seed or 0)
    rows = []
    for path in specs:
        spec = ShapeSpec.from_dict(json.loads(path.read_text()))
        X = as_cloud(read_cloud(path.with_suffix(".xyz")))
        T = random_transform(rng, args.transform, bounding_radius=spec.bounding_radius())
        res = None if args.resolution == 0 else args.resolution
        m = eval_reconstruction(X, theta, spec, args.n_eval, rng, transform=T, tau=args.tau, resolution=res)
        rows.append({"shape": path.stem, **m.to_dict()})
        print(f"{path.stem}: iou {m.iou:.4f}" + ("" if m.chamfer is None else f" chamfer {m.chamfer:.4f}"))
    summary = {
        "mode": theta.mode,
        "transform": args.transform,
        "mean_iou": float(np.mean([r["iou"] for r in rows])),
        "mean_chamfer": None if args.resolution == 0 else float(np.mean([r["chamfer"] for r in rows])),
        "shapes": rows,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"mean iou {summary['mean_iou']:.4f}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    common.add_argument("--mode", choices=MODES, default=None, help="model mode (overrides config)")
    common.add_argument("--resolution", type=int, default=64, help="lattice size per axis")
    common.add_argument("--tau", type=float, default=0.5, help="iso level")
    common.add_argument("--k", type=int, default=None, help="neighbours per graph node (config default 20)")
    common.add_argument("--out", metavar="PATH", default=None, help="output path")
    common.add_argument("--tolerance", type=float, default=1e-8, help="audit tolerance")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads; EGIF_THREADS overrides")

    p = _Parser(prog="egif", description="Equivariant graph implicit functions.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a model; writes model.egif and metrics.csv into --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", parents=[common], formatter_class=fmt, help="extract an OBJ mesh from a cloud")
    s.add_argument("checkpoint")
    s.add_argument("cloud", help="XYZ or binary PLY point cloud")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("audit", parents=[common], formatter_class=fmt, help="check invariance under random transforms")
    s.add_argument("checkpoint")
    s.add_argument("--n-transforms", type=int, default=100, help="transforms per class")
    s.add_argument("--queries", type=int, default=200, help="number of probe queries")
    s.add_argument("--cloud", default=None, help="probe cloud (default: seeded synthetic shape)")
    s.add_argument("--classes", nargs="+", choices=CLASSES, default=list(CLASSES), help="transform classes to test")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("gen-data", parents=[common], formatter_class=fmt, help="write synthetic clouds and shape specs")
    s.add_argument("--family", choices=FAMILIES, default="sphere_box", help="shape family")
    s.add_argument("--count", type=int, default=10, help="number of shapes")
    s.add_argument("--n-surface", type=int, default=300, help="points per cloud")
    s.add_argument("--noise-sd", type=float, default=0.005, help="Gaussian noise on surface points")
    s.add_argument("--max-primitives", type=int, default=3, help="primitives per shape")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="IoU / Chamfer on a gen-data directory")
    s.add_argument("checkpoint")
    s.add_argument("--data", required=True, help="directory written by gen-data")
    s.add_argument("--n-eval", type=int, default=100_000, help="uniform IoU queries per shape")
    s.add_argument("--transform", choices=("identity", "rotation", "translation", "scale", "all"), default="identity", help="pose applied to cloud and queries")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, GeometryError, checkpoint.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
