"""Command line front end.

Subcommands: ``run`` (full pipeline), ``synth`` (fixture generation),
``metrics`` (mesh / cloud evaluation), ``sweep`` (parameter sensitivity)
and ``profile-scan`` (transport cost profile across a crease).  Every
subcommand writes a JSON manifest next to its primary output.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .cloud import OrientedCloud, PipelineConfig, average_gap, build_index, \
    normalize
from .edge_zone import profile_scan
from .errors import RfepsError
from .mesh import TriangleMesh
from .metrics import full_report
from .pipeline import StageError, run_pipeline, sweep, sweep_to_csv, \
    write_manifest
from .synth import SyntheticSpec, make_synthetic, wedge_probe_path

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2  # consolidation-only run (no base mesh given)


def _read_cloud(path):
    path = str(path)
    if path.lower().endswith(".ply"):
        return io.read_ply_cloud(path)
    return io.read_xyz(path)


def _add_config_args(p):
    p.add_argument("--xi", type=float, default=0.1)
    p.add_argument("--radius-mult", type=float, default=2.0)
    p.add_argument("--mu", type=float, default=0.01)
    p.add_argument("--weight-mult", type=float, default=8.0)
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("RFEPS_THREADS", "1")))
    p.add_argument("--unweighted-omt", action="store_true",
                   help="use unweighted transport costs")
    p.add_argument("--keep-normals", action="store_true",
                   help="trust input normals instead of re-estimating them")


def _config_from(args):
    return PipelineConfig(
        xi=args.xi, radius_mult=args.radius_mult, mu=args.mu,
        weight_mult=args.weight_mult, thread_count=max(1, args.threads),
        weighted_omt=not args.unweighted_omt,
        normal_init="keep" if args.keep_normals else "pca")


def cmd_run(args):
    cloud = _read_cloud(args.input)
    base = None
    if args.base:
        if not Path(args.base).exists():
            print(f"base mesh {args.base} not found; running consolidation "
                  "stages only", file=sys.stderr)
        else:
            base = TriangleMesh(*io.read_mesh(args.base))
    config = _config_from(args)
    result = run_pipeline(cloud, base, config, seed=args.seed,
                          stage=args.stage,
                          dump_dir=args.out + ".stages" if args.dump_stages else None,
                          use_weights=args.weights != "off")
    aug_path = args.augmented_out or (args.out + ".augmented.ply")
    io.write_ply_cloud(aug_path, result.augmented)
    wrote_mesh = False
    if result.mesh is not None:
        io.write_obj(args.out, result.mesh.vertices, result.mesh.triangles)
        wrote_mesh = True
    write_manifest(args.out + ".manifest.json", result.manifest, extra={
        "input": str(args.input), "base": str(args.base),
        "augmented_output": str(aug_path),
        "mesh_output": str(args.out) if wrote_mesh else None,
    })
    if not wrote_mesh and args.stage == "all":
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_synth(args):
    spec = SyntheticSpec(shape=args.shape.replace("-", "_"),
                         n_points=args.n, noise_sigma=args.noise,
                         flip_fraction=args.flip_fraction,
                         normal_noise_tau=args.normal_noise,
                         dihedral=args.dihedral)
    fixture = make_synthetic(spec, seed=args.seed)
    prefix = args.out_prefix
    io.write_ply_cloud(prefix + ".cloud.ply", fixture.cloud)
    io.write_obj(prefix + ".gt.obj", fixture.gt_mesh.vertices,
                 fixture.gt_mesh.triangles)
    io.write_obj(prefix + ".base.obj", fixture.base_mesh.vertices,
                 fixture.base_mesh.triangles)
    io.write_segments(prefix + ".segments.txt", fixture.segments)
    write_manifest(prefix + ".manifest.json", {
        "spec": vars(spec), "seed": args.seed, "versions": {"rfeps": __version__},
    })
    return EXIT_OK


def cmd_metrics(args):
    pred = TriangleMesh(*io.read_mesh(args.pred))
    gt = TriangleMesh(*io.read_mesh(args.gt))
    cloud_points = _read_cloud(args.cloud).positions if args.cloud else None
    segments = io.read_segments(args.segments) if args.segments else None
    report = full_report(pred, gt, cloud_points=cloud_points,
                         segments=segments, n_samples=args.samples,
                         seed=args.seed)
    line = json.dumps(report.to_dict(), sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(line + "\n")
        write_manifest(args.out + ".manifest.json",
                       {"pred": args.pred, "gt": args.gt,
                        "versions": {"rfeps": __version__}})
    print(line)
    return EXIT_OK


def cmd_sweep(args):
    spec = SyntheticSpec(shape=args.shape.replace("-", "_"), n_points=args.n,
                         noise_sigma=args.noise)
    values = [float(v) for v in args.values.split(",")]
    rows = sweep(args.param, values, spec, seed=args.seed)
    sweep_to_csv(rows, args.out)
    write_manifest(args.out + ".manifest.json", {
        "param": args.param, "values": values, "shape": args.shape,
        "n": args.n, "noise": args.noise, "seed": args.seed,
        "versions": {"rfeps": __version__},
    })
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


def cmd_profile_scan(args):
    spec = SyntheticSpec(shape="wedge", n_points=args.n,
                         dihedral=args.dihedral)
    fixture = make_synthetic(spec, seed=args.seed)
    cloud, _ = normalize(fixture.cloud)
    # The analytic crease runs along y; renormalization keeps it on y = const.
    config = PipelineConfig(weighted_omt=not args.unweighted_omt)
    delta = average_gap(cloud)
    query = build_index(cloud)
    span = 4.0 * config.radius_mult * delta
    svals, probes = wedge_probe_path(args.dihedral, span, args.count)
    # Map analytic probe coordinates through the same normalization.
    lo = fixture.cloud.positions.min(axis=0)
    hi = fixture.cloud.positions.max(axis=0)
    center = (lo + hi) / 2.0
    scale = 1.0 / (hi - lo).max()
    svals_n, probes_n = wedge_probe_path(args.dihedral, span / scale, args.count)
    probes = (probes_n - center) * scale
    svals = svals_n * scale
    rows = profile_scan(cloud, query, config, delta, probes, svals)
    with open(args.out, "w") as fh:
        fh.write("signed_distance,cost,angle\n")
        for s, c, a in rows:
            fh.write(f"{s},{c},{a}\n")
    write_manifest(args.out + ".manifest.json", {
        "dihedral": args.dihedral, "n": args.n, "count": args.count,
        "seed": args.seed, "versions": {"rfeps": __version__},
    })
    print(f"wrote {args.out} ({len(rows)} probes)")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rfeps",
        description="Consolidate a CAD-type point cloud and reconstruct a "
                    "feature-line aligned interpolating mesh.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline on a cloud (+ base mesh)")
    p.add_argument("--input", required=True, help="point cloud (.ply or .xyz)")
    p.add_argument("--base", help="base surface mesh (.obj or .ply)")
    p.add_argument("--out", required=True, help="output mesh path (.obj)")
    p.add_argument("--augmented-out", help="augmented cloud output (.ply)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage", choices=("denoise", "edges", "consolidate", "all"),
                   default="all")
    p.add_argument("--dump-stages", action="store_true")
    p.add_argument("--weights", choices=("on", "off"), default="on",
                   help="'off' forces the equal-weight (Voronoi) run")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic fixture")
    p.add_argument("--shape", required=True,
                   choices=("cube", "wedge", "cylinder", "box-with-hole",
                            "thin-plate"))
    p.add_argument("--n", type=int, default=50000)
    p.add_argument("--noise", type=float, default=0.0,
                   help="Gaussian sigma as a fraction of the bbox diagonal")
    p.add_argument("--flip-fraction", type=float, default=0.0)
    p.add_argument("--normal-noise", type=float, default=0.0)
    p.add_argument("--dihedral", type=float, default=math.pi / 2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("metrics", help="evaluate meshes / clouds")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--cloud", help="optional cloud for one-sided metrics")
    p.add_argument("--segments", help="feature segment file")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the JSON line here as well")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("sweep", help="parameter sensitivity table")
    p.add_argument("--param", required=True, choices=("xi", "radius_mult", "mu"))
    p.add_argument("--values", required=True, help="comma separated values")
    p.add_argument("--shape", default="cube")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("profile-scan",
                       help="cost/angle profile across a wedge crease")
    p.add_argument("--dihedral", type=float, default=math.pi / 2)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--count", type=int, default=81)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unweighted-omt", action="store_true")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_profile_scan)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.original}", file=sys.stderr)
        return EXIT_ERROR
    except RfepsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
