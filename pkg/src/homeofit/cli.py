"""Command-line entry points: fit, eval, export, prepare, fixture.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff, fixtures, geometry, metrics, serialization, trainer
from .geometry import MeshError, TriMesh, load_mesh, normalize_mesh, save_mesh
from .trainer import CheckpointError, FitConfig, FitDivergence

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_CONFIG_KEYS = {f.name for f in dataclasses.fields(FitConfig)}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config_file(path) -> dict:
    """Strict config reader: every key must be a FitConfig field."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise MeshError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {sorted(unknown)}")
    return data


def resolve_mesh(spec: str) -> TriMesh:
    """A mesh argument is an OBJ path or `fixture:<name>`."""
    if spec.startswith("fixture:"):
        return fixtures.make_fixture(spec.split(":", 1)[1])
    path = Path(spec)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    return load_mesh(path)


def _build_fit_config(args) -> FitConfig:
    values = dict(load_config_file(args.config)) if args.config else {}
    if args.preset == "desk" and not args.config:
        values = dataclasses.asdict(trainer.desk_config())
    for key in ("primitives", "iters", "seed"):
        flag = {"iters": "iterations"}.get(key, key)
        v = getattr(args, key, None)
        if v is not None:
            values[flag] = v
    return FitConfig(**values)


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit(args) -> int:
    config = _build_fit_config(args)
    mesh = resolve_mesh(args.mesh)
    geometry.require_watertight(mesh)
    mesh, transform = normalize_mesh(mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.occupancy:
        pool = geometry.OccupancyPool.load(args.occupancy)
    else:
        pool = geometry.build_occupancy_set(
            mesh, config.pool_size, np.random.default_rng(config.seed)
        )

    state = None
    if args.resume:
        state, _ = trainer.load_checkpoint(args.resume, config)

    echo = {
        "mesh": args.mesh,
        "normalize": transform.to_dict(),
        "config": dataclasses.asdict(config),
    }
    (out / "config.json").write_text(json.dumps(echo, sort_keys=True, indent=1) + "\n")

    result = trainer.fit(mesh, config, pool=pool, out_dir=out, state=state)
    final = result.history[-1] if result.history else {}
    print(f"checkpoint: {result.checkpoint_dir}")
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    state, saved_config = trainer.load_checkpoint(args.checkpoint)
    mesh = resolve_mesh(args.mesh)
    geometry.require_watertight(mesh)
    mesh, _ = normalize_mesh(mesh)
    report = metrics.evaluate(
        state.model,
        mesh,
        mesh_name=args.mesh,
        n_iou=args.samples,
        n_chamfer=args.chamfer_samples,
        seed=args.seed,
    )
    print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    csv_path = Path(args.csv) if args.csv else Path(args.checkpoint) / "eval_summary.csv"
    metrics.append_csv(csv_path, report)
    return EXIT_OK


def cmd_export(args) -> int:
    try:
        n_lat, n_lon = (int(x) for x in args.resolution.lower().split("x"))
    except ValueError:
        raise UsageError(f"invalid resolution '{args.resolution}', expected LATxLON")
    if n_lat < 3 or n_lon < 3:
        raise UsageError("resolution must be at least 3x3")
    state, _ = trainer.load_checkpoint(args.checkpoint)
    model = state.model
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meshes = metrics.extract_primitive_meshes(model, n_lat, n_lon)
    for m, mesh in enumerate(meshes):
        save_mesh(out / f"primitive_{m:02d}.obj", mesh)
    if args.union:
        verts, faces = [], []
        offset = 0
        for prim, mesh in enumerate(meshes):
            keep = metrics.retained_face_mask(model, mesh, prim)
            if keep.any():
                verts.append(mesh.vertices)
                faces.append(mesh.faces[keep] + offset)
                offset += len(mesh.vertices)
        if not faces:
            raise metrics.MetricError("union export: every face is interior")
        save_mesh(out / "union.obj", TriMesh(np.concatenate(verts), np.concatenate(faces)))
    print(f"wrote {len(meshes)} primitive meshes to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    mesh = resolve_mesh(args.mesh)
    geometry.require_watertight(mesh)
    mesh, _ = normalize_mesh(mesh)
    pool = geometry.build_occupancy_set(mesh, args.pool, np.random.default_rng(args.seed))
    pool.save(args.out)
    inside = float(np.mean(pool.labels))
    print(f"pool: {pool.size} points, inside fraction {inside:.4f}, saved to {args.out}")
    return EXIT_OK


def cmd_fixture(args) -> int:
    mesh = fixtures.make_fixture(args.name)
    save_mesh(args.out, mesh)
    print(f"wrote {args.name} fixture ({len(mesh.vertices)} vertices) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="homeofit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit primitives to a watertight mesh")
    p.add_argument("--mesh", required=True, help="OBJ path or fixture:<name>")
    p.add_argument("--primitives", type=int, default=None, help="primitive count M")
    p.add_argument("--iters", type=int, default=None, help="optimization steps")
    p.add_argument("--config", default=None, help="JSON config file (strict keys)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper",
                   help="paper-scale or minutes-scale defaults")
    p.add_argument("--occupancy", default=None, help="precomputed occupancy pool dir")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=100000, help="IoU cube samples")
    p.add_argument("--chamfer-samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None, help="CSV summary path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write primitive meshes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", default="64x64", help="UV sphere LATxLON")
    p.add_argument("--out", required=True)
    p.add_argument("--union", action="store_true",
                   help="also write union.obj with interior faces removed")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("prepare", help="precompute an occupancy pool")
    p.add_argument("--mesh", required=True)
    p.add_argument("--pool", type=int, default=100000, help="pool size")
    p.add_argument("--out", required=True, help="pool cache directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("fixture", help="write a procedural test mesh")
    p.add_argument("--name", required=True, choices=sorted(fixtures.FIXTURES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixture)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MeshError, CheckpointError, serialization.SerializationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (autodiff.NumericError, FitDivergence, metrics.MetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
