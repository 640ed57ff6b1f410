"""Command-line front end.

Exit codes: 0 success, 2 usage / input / format errors, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
MANIFEST_HEADER = "window,t_start_us,t_end_us,csv,pgm"


class UsageError(Exception):
    pass


def _limit_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _need_file(path):
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    return path


def _outdir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands --------------------------------------------------------------------

def cmd_generate(args):
    from .events import parse_scene_spec, synth_scene, write_events, write_events_bin, write_labels

    _need_file(args.spec)
    try:
        spec = parse_scene_spec(Path(args.spec).read_text(), args.spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args.out)
    stream, labels = synth_scene(spec, args.seed)
    write_events(stream, out / "events.csv")
    if args.binary:
        write_events_bin(stream, out / "events.bin")
    write_labels(labels, out / "labels.csv")
    (out / "spec.resolved").write_text(spec.to_text() + f"seed={args.seed}\n")
    print(f"wrote {len(stream)} events and {len(labels)} label intervals to {out}")


def _load_config(path):
    from .config import ClConfig

    if path is None:
        return ClConfig()
    _need_file(path)
    try:
        return ClConfig.from_file(path)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _read_stream(path, cfg):
    from .events import read_events, read_events_bin

    _need_file(path)
    if str(path).endswith(".bin"):
        return read_events_bin(path)
    return read_events(path, cfg.height, cfg.width)


def cmd_train(args):
    from .continual import Model, checkpoint_save, run_sequence
    from .dlbp import DivergenceError
    from .events import read_labels

    cfg = _load_config(args.config)
    out = _outdir(args.out)
    (out / "config.resolved").write_text(cfg.to_text())
    stream = _read_stream(args.events, cfg)
    _need_file(args.labels)
    labels = read_labels(args.labels)
    model = Model.create(cfg)
    records = []
    try:
        model, log = run_sequence(stream, labels, model=model,
                                  callback=lambda m, r: records.append(r))
    except DivergenceError as exc:
        last = records[-1] if records else None
        print(f"divergence: {exc}", file=sys.stderr)
        if last is not None:
            print(f"last good window {last.window}: loss={last.loss} "
                  f"phi_fro={last.phi_fro} psi_fro={last.psi_fro}", file=sys.stderr)
        return EXIT_DIVERGED
    checkpoint_save(model, out / "model.ckpt")
    log.to_csv(out / "trainlog.csv")
    print(f"trained {len(log)} windows; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(args):
    from .continual import checkpoint_load, infer_sequence
    from .readout import write_map_csv, write_pgm

    _need_file(args.checkpoint)
    model = checkpoint_load(args.checkpoint)
    cfg = model.cfg
    out = _outdir(args.out)
    (out / "config.resolved").write_text(cfg.to_text())
    stream = _read_stream(args.events, cfg)
    maps = infer_sequence(model, stream)
    win_us = int(round(cfg.n_s * cfg.dt * 1e6))
    lines = [MANIFEST_HEADER]
    for w, (t0, A) in enumerate(maps):
        csv_name, pgm_name = f"map_{w:05d}.csv", f"map_{w:05d}.pgm"
        write_map_csv(A, out / csv_name)
        write_pgm(A, out / pgm_name)
        lines.append(f"{w},{t0},{t0 + win_us},{csv_name},{pgm_name}")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(maps)} maps to {out}")
    return EXIT_OK


def _read_manifest(maps_dir):
    path = Path(maps_dir) / "manifest.csv"
    _need_file(path)
    rows = path.read_text().splitlines()
    if not rows or rows[0] != MANIFEST_HEADER:
        raise UsageError(f"{path}: bad manifest header")
    out = []
    for lineno, line in enumerate(rows[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise UsageError(f"{path}: line {lineno}: expected 5 fields")
        out.append((int(parts[0]), int(parts[1]), int(parts[2]), parts[3]))
    for a, b in zip(out, out[1:]):
        if b[0] != a[0] + 1 or b[1] != a[2]:
            raise UsageError(f"{path}: windows {a[0]} and {b[0]} are not consecutive")
    return out


def cmd_eval(args):
    from .config import ClConfig
    from .detect import D_GRID, pr_sweep, write_summary
    from .events import read_labels
    from .readout import read_map_csv

    maps_dir = Path(args.maps)
    cfg_path = maps_dir / "config.resolved"
    cfg = ClConfig.from_file(cfg_path) if cfg_path.is_file() else ClConfig()
    manifest = _read_manifest(maps_dir)
    _need_file(args.labels)
    labels = read_labels(args.labels)
    maps, boxes, missing = [], [], 0
    for w, t0, t1, name in manifest:
        iv = labels.at((t0 + t1) // 2)
        if iv is None:
            missing += 1
            continue
        maps.append(read_map_csv(maps_dir / name))
        boxes.append(iv.box)
    if missing:
        raise UsageError(f"misalignment: {len(manifest)} maps but only "
                         f"{len(manifest) - missing} are covered by label intervals")
    out = _outdir(args.out)
    curve = pr_sweep(maps, boxes, cfg.height, cfg.width, D_GRID, cfg.dbscan_eps,
                     cfg.dbscan_min_pts)
    curve.to_csv(out / "pr.csv")
    write_summary(out / "summary.jsonl", [], curve, {"windows": len(maps)})
    if args.pgm_heatmaps:
        from .detect import interpolate_map
        from .readout import write_pgm

        hm = _outdir(out / "heatmaps")
        for (w, *_), A in zip(manifest, maps):
            write_pgm(interpolate_map(A, cfg.height, cfg.width), hm / f"heat_{w:05d}.pgm")
    (out / "eval.resolved").write_text(f"maps={maps_dir}\nlabels={args.labels}\n"
                                       f"dbscan_eps={cfg.dbscan_eps!r}\n"
                                       f"dbscan_min_pts={cfg.dbscan_min_pts}\n")
    print(f"peak F1 {curve.peak_f1:.4f} over {len(maps)} windows")
    return EXIT_OK


def cmd_report(args):
    from .detect import FoldResult, PrCurve, average_curves, write_summary

    folds = []
    for k, d in enumerate(args.folds):
        path = Path(d) / "pr.csv"
        _need_file(path)
        folds.append(FoldResult(k, k, PrCurve.from_csv(path)))
    try:
        avg = average_curves(f.curve for f in folds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args.out)
    avg.to_csv(out / "pr.csv")
    write_summary(out / "summary.jsonl", folds, avg)
    print(f"averaged peak F1 {avg.peak_f1:.4f} over {len(folds)} folds")
    return EXIT_OK


def cmd_inspect(args):
    import numpy as np

    from .continual import checkpoint_load

    _need_file(args.checkpoint)
    m = checkpoint_load(args.checkpoint)
    psi = m.readout.Psi
    info = {
        "window": m.window,
        "phi_fro": float(np.linalg.norm(m.phi)),
        "wtilde_fro": float(np.linalg.norm(m.engine.gram.wt)),
        "psi_fro": float(np.linalg.norm(psi)),
        "psi_sha256": hashlib.sha256(np.ascontiguousarray(psi, "<f8").tobytes()).hexdigest(),
        "b": m.readout.b,
        "adam_steps": m.adam.t,
        "adam_skipped": m.adam.skipped,
        "seed": m.cfg.seed,
    }
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser():
    from .config import describe

    p = argparse.ArgumentParser(
        prog="snncl",
        description="Continual learning of a convolutional spiking sparse-coding network "
                    "with an attention readout, on event streams.",
        epilog="RunConfig keys (flat key=value file, unknown keys rejected):\n" + describe(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=1,
                   help="bound on internal threads; 1 guarantees bit-reproducibility")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="render a labelled synthetic event sequence")
    g.add_argument("--spec", required=True, help="scene spec, key=value per line")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--binary", action="store_true", help="also write events.bin")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="single-pass continual training on one sequence")
    t.add_argument("--config", help="RunConfig file (defaults if omitted)")
    t.add_argument("--events", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="per-window attention maps from a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--events", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="precision-recall sweep of inferred maps")
    e.add_argument("--maps", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--pgm-heatmaps", action="store_true",
                   help="also write upsampled greyscale heatmaps")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="average PR curves of several folds")
    r.add_argument("--folds", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("inspect", help="print a checkpoint summary as JSON")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _limit_threads(args.threads)
    from .container import FormatError
    from .events import EventFormatError

    try:
        rc = args.func(args)
    except (UsageError, FormatError, EventFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
