"""Command-line entry point.

    viewfeat extract --images DIR --cameras JSON --geometry PATH \
                     --basis JSON --dim 32 --out bank.avdf

Runs the offline extraction pipeline (backbone features, projection,
visibility, PCA reduction) and writes the binary feature bank plus a JSON
sidecar next to it.  The pipeline is deterministic given the inputs; --seed
is accepted for interface uniformity and recorded in the sidecar.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .bank import extract_bank, make_sidecar, write_bank
from .features import backbone_names
from .images import load_cameras
from .scene import load_basis, load_scene

log = logging.getLogger("viewfeat")


def build_parser():
    p = argparse.ArgumentParser(prog="viewfeat",
                                description="multi-view surface feature "
                                            "bank extractor")
    sub = p.add_subparsers(dest="command", required=True)
    e = sub.add_parser("extract", help="extract a feature bank")
    e.add_argument("--images", required=True, help="directory of input images")
    e.add_argument("--cameras", required=True,
                   help="JSON list of {file, K: 9 floats, P: 12 floats}")
    e.add_argument("--geometry", required=True, help="scene geometry JSON")
    e.add_argument("--basis", required=True, help="surface basis points JSON")
    e.add_argument("--dim", type=int, default=32, help="output feature dim")
    e.add_argument("--backbone", default="multiscale",
                   choices=backbone_names())
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="output bank path (.avdf)")
    return p


def run_extract(args) -> int:
    scene = load_scene(args.geometry)
    basis = load_basis(args.basis)
    cameras = load_cameras(args.cameras, args.images)
    log.info("extracting: %d basis points, %d views, dim %d, backbone %s",
             len(basis), len(cameras), args.dim, args.backbone)
    feat, vis, ext, comp, mean = extract_bank(scene, basis, cameras,
                                              args.dim, args.backbone)
    sidecar = make_sidecar(args.backbone, comp, mean, args.basis)
    sidecar["seed"] = args.seed
    write_bank(args.out, feat, vis, ext, sidecar)
    print(f"wrote {args.out}: {feat.shape[0]} points x {feat.shape[1]} views "
          f"x {feat.shape[2]} dims, "
          f"{vis.mean() * 100:.1f}% (point, view) pairs visible")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AVDAR_LOG", "WARNING").upper(),
                        format="%(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run_extract(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
