"""Command line entry points.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 external
mesher failure. Structured progress lines go to stderr; machine-readable
results go to JSON files (and stdout where noted).
"""

import argparse
import json
import logging
import os
import sys

from .config import (ConfigError, MesherError, PipelineConfig, StageError,
                     load_config)
from .grid import save_vgrid
from .mesh_io import load_surface, save_tet_mesh
from .metrics import surface_distances
from .phantom import make_phantom
from .pipeline import bench, run


def _cmd_run(args):
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    res = run(cfg)
    print(json.dumps(res.report, indent=1, sort_keys=True))
    return 0


def _cmd_phantom(args):
    ph = make_phantom(args.kind, args.seed, dims=args.dims,
                      gap_voxels=args.gap, n_blobs=args.blobs)
    os.makedirs(args.out, exist_ok=True)
    save_tet_mesh(ph.heart, os.path.join(args.out, "heart.tmesh"))
    save_vgrid(ph.calcification,
               os.path.join(args.out, "calcification.vgrid"))
    with open(os.path.join(args.out, "descriptor.json"), "w") as fh:
        json.dump(ph.descriptor, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(args.out)
    return 0


def _cmd_metrics(args):
    pred = load_surface(args.pred)
    ref = load_surface(args.ref)
    out = surface_distances(pred, ref, n_samples=args.samples,
                            seed=args.seed)
    print(json.dumps(out, indent=1, sort_keys=True))
    return 0


def _cmd_bench(args):
    cfg = load_config(args.config) if args.config else \
        PipelineConfig(out=args.out or "bench-out").validate()
    if args.out:
        cfg.out = args.out
    summary = bench(cfg, args.cases, workers=args.workers)
    print(json.dumps({"stages": summary["stages"],
                      "n_cases": summary["n_cases"],
                      "n_ok": summary["n_ok"]},
                     indent=1, sort_keys=True))
    return 0 if summary["n_ok"] == summary["n_cases"] else 3


def _parser():
    ap = argparse.ArgumentParser(
        prog="cmac",
        description="Embed a voxel calcification segmentation into a "
                    "labeled tetrahedral heart mesh.")
    ap.add_argument("--quiet", action="store_true",
                    help="suppress progress lines on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("phantom", help="generate a synthetic test case")
    p.add_argument("--kind", required=True,
                   choices=["sphere-shell", "tube-leaflets"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=int, default=48)
    p.add_argument("--gap", type=float, default=0.0,
                   help="blob-to-wall gap in voxels")
    p.add_argument("--blobs", type=int, default=None)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("metrics", help="surface distances between meshes")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("bench", help="time the pipeline over phantoms")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--config", help="optional base config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_bench)
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname).1s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    except MesherError as e:
        print("mesher failure: %s" % e, file=sys.stderr)
        return 4
    except StageError as e:
        print("stage failure: %s" % e, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
