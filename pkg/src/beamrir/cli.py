"""Command-line front end: trace | render | fit | eval | grad-check | gen-synthetic.

Every subcommand is deterministic given its inputs and --seed, exits 0 on
success and nonzero with a one-line diagnostic on failure.  The AVDAR_LOG
environment variable sets the log level (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .beams import BeamConfig, trace_paths
from .data import (DataError, ShoeboxSpec, gen_synthetic, load_manifest,
                   load_wav, manifest_records, save_wav)
from .dsp import default_grid
from .geometry import load_basis_points, load_geometry
from .metrics import evaluate
from .params import load_checkpoint, save_checkpoint
from .reflection import load_feature_bank
from .source import RenderConfig, RirModel, config_from_json, config_to_json
from .training import TrainConfig, fit

log = logging.getLogger("beamrir")


def _setup_logging():
    level = os.environ.get("AVDAR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _vec3(text):
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 numbers, got {text!r}")
    return np.asarray(parts)


def _load_scene(args):
    geom = load_geometry(args.geometry)
    bank = load_feature_bank(args.bank) if getattr(args, "bank", None) else None
    basis = load_basis_points(args.basis).points \
        if getattr(args, "basis", None) else None
    if bank is not None and basis is None:
        raise DataError("--bank requires --basis for index alignment")
    return geom, bank, basis


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_trace(args):
    geom = load_geometry(args.geometry) if args.geometry else None
    cfg = BeamConfig(n_beams=args.n_beams, max_depth=args.max_depth)
    paths = trace_paths(geom, args.source, args.listener, cfg,
                        n_threads=args.threads)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for p in paths:
            out.write(json.dumps({
                "order": p.order, "faces": list(p.faces),
                "planes": [int(g) for g in p.planes],
                "toa": p.toa, "phi": p.phi,
                "points": p.points.tolist()}) + "\n")
    finally:
        if args.out:
            out.close()
    log.info("traced %d paths", len(paths))
    return 0


def cmd_render(args):
    store, config = load_checkpoint(args.checkpoint)
    if config is None:
        raise DataError(f"{args.checkpoint}: missing config sidecar "
                        f"({args.checkpoint}.json)")
    model, cfg = config_from_json(config)
    geom, bank, basis = _load_scene(args) if args.geometry else (None, None, None)
    ir = model.render_ir(args.source, args.orientation, args.listener, geom,
                         store, cfg, bank=bank, basis=basis)
    save_wav(args.out, ir)
    if args.plot:
        t = np.arange(len(ir.samples)) / ir.sample_rate
        e = np.flip(np.cumsum(np.flip(ir.samples ** 2)))
        db = 10.0 * np.log10(np.maximum(e / max(e[0], 1e-30), 1e-30))
        with open(args.plot, "w") as f:
            f.write("time_s,amplitude,decay_db\n")
            for row in zip(t, ir.samples, db):
                f.write("%.8f,%.8g,%.4f\n" % row)
    log.info("wrote %s (%d samples)", args.out, len(ir.samples))
    return 0


def _train_model(args, manifest):
    grid = default_grid(sample_rate=manifest.sample_rate,
                        fft_size=args.fft_size)
    cfg = RenderConfig(sample_rate=manifest.sample_rate,
                       rir_length=manifest.rir_length, grid=grid,
                       beams=BeamConfig(n_beams=args.n_beams,
                                        max_depth=args.max_depth),
                       n_threads=args.threads)
    model = RirModel.build(grid, n_resid_rays=args.resid_rays,
                           seed=args.seed)
    return model, cfg


def cmd_fit(args):
    base = Path(args.manifest).parent
    manifest = load_manifest(args.manifest)
    records = manifest_records(manifest, base)
    geom = load_geometry(base / manifest.geometry_path)
    bank = basis = None
    if manifest.feature_bank_path:
        bank = load_feature_bank(base / manifest.feature_bank_path)
        if not manifest.basis_path:
            raise DataError("manifest has a feature bank but no basis points")
        basis = load_basis_points(base / manifest.basis_path)
    model, cfg = _train_model(args, manifest)
    store = None
    if args.resume:
        store, _ = load_checkpoint(args.resume)
    tcfg = TrainConfig(epochs=args.epochs, seed=args.seed,
                       order_step_epochs=args.order_step,
                       max_order=args.max_depth,
                       log_path=args.log)
    store, history = fit(model, records, geom, cfg, tcfg, bank=bank,
                         basis=basis, store=store)
    save_checkpoint(store, args.out, config=config_to_json(model, cfg))
    first, last = history[0]["loss"], history[-1]["loss"]
    print(json.dumps({"epochs": len(history), "initial_loss": first,
                      "final_loss": last, "checkpoint": str(args.out)}))
    return 0


def cmd_eval(args):
    store, config = load_checkpoint(args.checkpoint)
    if config is None:
        raise DataError(f"{args.checkpoint}: missing config sidecar")
    model, cfg = config_from_json(config)
    base = Path(args.manifest).parent
    manifest = load_manifest(args.manifest)
    records = manifest_records(manifest, base)
    if not records:
        raise DataError("manifest has no records")
    geom = load_geometry(base / manifest.geometry_path)
    bank = basis = None
    if manifest.feature_bank_path:
        bank = load_feature_bank(base / manifest.feature_bank_path)
        basis = load_basis_points(base / manifest.basis_path).points
    preds, gts = [], []
    for r in records:
        preds.append(model.render_ir(r.source, r.orientation, r.listener,
                                     geom, store, cfg, bank=bank, basis=basis))
        gts.append(r.rir)
    report = evaluate(preds, gts)
    out = {"loudness_db": report.loudness_err, "c50_db": report.c50_err,
           "edt_ms": report.edt_err, "t60_pct": report.t60_err,
           "n_pairs": report.n_pairs, "n_invalid": report.n_invalid}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    if args.per_pair:
        from .metrics import c50, edt, loudness_error, t60
        with open(args.per_pair, "w") as f:
            f.write("index,loudness_db,c50_pred,c50_gt,t60_pred,t60_gt\n")
            for i, (p, g) in enumerate(zip(preds, gts)):
                f.write("%d,%.4f,%.4f,%.4f,%s,%s\n" % (
                    i, loudness_error(p, g), c50(p), c50(g), t60(p), t60(g)))
    return 0


# canonical probe shapes per registered op (keyword constants included)
_OP_PROBES = {
    "add": ([(5, 3), (5, 3)], {}), "sub": ([(5, 3), (5, 3)], {}),
    "mul": ([(5, 3), (5, 3)], {}), "div": ([(5, 3), (5, 3)], {}),
    "neg": ([(5, 3)], {}), "exp": ([(5, 3)], {}), "log": ([(5, 3)], {}),
    "sqrt": ([(5, 3)], {}), "sin": ([(5, 3)], {}), "cos": ([(5, 3)], {}),
    "tanh": ([(5, 3)], {}), "sigmoid": ([(5, 3)], {}),
    "relu": ([(5, 3)], {}), "abs": ([(5, 3)], {}),
    "square": ([(5, 3)], {}), "clip_min": ([(5, 3)], {"floor": 0.1}),
    "sum": ([(5, 3)], {"axis": 1}), "mean": ([(5, 3)], {"axis": 0}),
    "reshape": ([(6, 4)], {"shape": (8, 3)}),
    "getitem": ([(7, 3)], {"idx": np.array([0, 2, 2, 5])}),
    "concat": ([(4, 3), (2, 3)], {"axis": 0}),
    "matmul": ([(5, 4), (4, 6)], {}),
    "softmax": ([(5, 7)], {"axis": -1}),
    "segment_sum": ([(6, 3)], {"seg_ids": np.array([0, 0, 1, 2, 2, 2]),
                               "n_segments": 4}),
    "revcumsum": ([(9,)], {"axis": -1}),
    "min_phase": ([(3, 33)], {"fft_size": 64}),
    "delay_sum": ([(3, 16)], {"delays": np.array([2.0, 5.25, 9.5]),
                              "scales": np.array([1.0, 0.5, 2.0]),
                              "out_len": 48}),
    "fft_convolve": ([(12,), (5,)], {}),
    "stft_mag": ([(300,)], {"win": 64}),
}


def cmd_grad_check(args):
    tol = args.tol
    rng = np.random.default_rng(args.seed)
    failures = 0
    print(f"{'op':<14} {'adjoint_err':>12}")
    for name in sorted(ad.registered_ops()):
        probe = _OP_PROBES.get(name)
        if probe is None:
            print(f"{name:<14} {'(no probe)':>12}")
            failures += 1
            continue
        shapes, consts = probe
        if name == "min_phase":  # needs positive magnitudes
            err = _min_phase_probe(rng)
        else:
            err = ad.adjoint_probe(name, shapes, consts=consts, rng=rng)
        status = "" if err <= tol else "  FAIL"
        if err > tol:
            failures += 1
        print(f"{name:<14} {err:>12.3e}{status}")
    return 1 if failures else 0


def _min_phase_probe(rng):
    op = ad.get_op("min_phase")
    worst = 0.0
    for _ in range(4):
        mag = np.abs(rng.standard_normal((3, 33))) + 0.2
        out, saved = op.forward(mag, fft_size=64)
        dx = rng.standard_normal(mag.shape)
        dy = rng.standard_normal(out.shape)
        jdx = op.jvp([dx], saved)
        cot = op.adjoint(dy, saved)[0]
        lhs = float(np.sum(jdx * dy))
        rhs = float(np.sum(dx * cot))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
    return worst


def cmd_gen(args):
    refl = np.asarray([float(x) for x in args.reflection.split(",")])
    if refl.size == 1:
        refl = np.full(6, refl[0])
    spec = ShoeboxSpec(args.dims, refl, max_order=args.order)
    grid = default_grid(sample_rate=args.sample_rate, fft_size=args.fft_size)
    gen_synthetic(spec, args.n_train, args.n_test, args.seed, args.out,
                  grid=grid, rir_length=args.length)
    print(json.dumps({"out": str(args.out), "n_train": args.n_train,
                      "n_test": args.n_test}))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def build_parser():
    ap = argparse.ArgumentParser(prog="beamrir",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace", help="dump specular paths as JSON lines")
    p.add_argument("--geometry", required=False)
    p.add_argument("--source", type=_vec3, required=True)
    p.add_argument("--listener", type=_vec3, required=True)
    p.add_argument("--n-beams", type=int, default=16384)
    p.add_argument("--max-depth", type=int, default=2)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("render", help="render an RIR from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--geometry")
    p.add_argument("--bank")
    p.add_argument("--basis")
    p.add_argument("--source", type=_vec3, required=True)
    p.add_argument("--orientation", type=_vec3, default=np.array([0, 0, 1.0]))
    p.add_argument("--listener", type=_vec3, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="CSV with waveform and decay curve")
    _add_common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("fit", help="fit parameters to a measurement manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--n-beams", type=int, default=16384)
    p.add_argument("--max-depth", type=int, default=2)
    p.add_argument("--fft-size", type=int, default=1024)
    p.add_argument("--order-step", type=int, default=100)
    p.add_argument("--resid-rays", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="CSV training log path")
    _add_common(p)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the JSON report here too")
    p.add_argument("--per-pair", help="CSV of per-pair metrics")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check",
                       help="probe every registered differentiable op")
    p.add_argument("--tol", type=float, default=1e-3)
    _add_common(p)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("gen-synthetic", help="generate a shoebox dataset")
    p.add_argument("--dims", type=_vec3, default=np.array([4.0, 5.0, 3.0]))
    p.add_argument("--reflection", default="0.8",
                   help="one value or six comma-separated wall values")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--n-train", type=int, default=12)
    p.add_argument("--n-test", type=int, default=24)
    p.add_argument("--length", type=float, default=0.32)
    p.add_argument("--sample-rate", type=float, default=16000.0)
    p.add_argument("--fft-size", type=int, default=1024)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_gen)
    return ap


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
