"""Command-line pipeline: synth, corrupt, train, infer, eval, analyze.

Every command writes its outputs and a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    is_sequence_file,
    load_sequence,
    prepare,
    read_matrix_stream,
    read_pose_stream,
    save_sequence,
    sparse_stream,
    write_matrix_stream,
    write_pose_stream,
)
from .edm import NoiseConfig, corrupt, eigen_report
from .errors import DegenerateGeometryError, FreezeAuditError, InvalidInputError, NumericError, ParseError
from .skeleton import human_skeleton

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("pwdmocap")


class UsageError(Exception):
    pass


def _write_manifest(out, command, config, seeds, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "python": platform.python_version(),
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_prepared(path, spec):
    seq = load_sequence(path, spec)
    if seq.has_anchors:
        return seq
    return prepare(seq, spec)


def _read_stream(path, spec):
    """Distance stream from a sequence file, a matrix-stream file or ``-`` (stdin)."""
    if path == "-":
        return read_matrix_stream(sys.stdin)
    if is_sequence_file(path):
        return sparse_stream(_load_prepared(path, spec), spec)
    return read_matrix_stream(path)


def cmd_synth(args, spec):
    from .synth import generate_synthetic

    seq = generate_synthetic(args.kind, args.duration, args.fps, seed=args.seed)
    if not args.raw:
        seq = prepare(seq, spec)
    out = _out_dir(args.out)
    path = out / "sequence.wipseq"
    save_sequence(seq, path)
    outputs = [path]
    if not args.raw:
        stream = out / "stream.txt"
        write_matrix_stream(sparse_stream(seq, spec), stream)
        outputs.append(stream)
    print(f"wrote {len(seq)} frames to {path}")
    config = {"kind": args.kind, "duration": args.duration, "fps": args.fps, "raw": args.raw}
    return config, {"synth": args.seed}, [], outputs


def cmd_corrupt(args, spec):
    clean = _read_stream(args.input, spec)
    noise = NoiseConfig(args.sigma, args.window, args.seed)
    noisy = corrupt(clean, noise)
    out = _out_dir(args.out)
    path = out / "stream.txt"
    write_matrix_stream(noisy, path)
    print(f"wrote {len(noisy)} corrupted matrices to {path}")
    return asdict(noise), {"noise": args.seed}, [args.input], [path]


def _read_config(path):
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"config {path}: {exc}") from exc


def cmd_train(args, spec):
    import torch

    from .model import ModelConfig, WiPModel, load_checkpoint
    from .training import TrainConfig, build_dataset, train_stage1, train_stage2

    if args.stage == 2 and not args.init:
        raise UsageError("stage 2 needs --init pointing at a stage-1 checkpoint")
    cfg_file = _read_config(args.config)
    train_cfg = TrainConfig(**{**cfg_file.get("train", {}), "stage": args.stage})
    if args.steps is not None:
        train_cfg.total_steps = args.steps
    sequences = [_load_prepared(p, spec) for p in args.data]
    out = _out_dir(args.out)
    torch.manual_seed(train_cfg.seed)
    show = lambda row: print(f"step {row['step']:>6d}  loss {row['total']:.5f}  pd {row['pd']:.5f}", flush=True)
    if args.stage == 1:
        model_cfg = ModelConfig.from_dict(cfg_file.get("model", {}))
        model = WiPModel(model_cfg)
        data = build_dataset(sequences, spec, model_cfg, NoiseConfig(0.0, 1), 1, train_cfg.seed)
        result = train_stage1(model, data, train_cfg, spec, out, callback=show)
    else:
        model, payload = load_checkpoint(args.init)
        if payload["stage"] != "stage1":
            raise UsageError(f"{args.init} is a {payload['stage']} checkpoint, stage 2 needs stage1")
        if "model" in cfg_file:
            load_checkpoint(args.init, ModelConfig.from_dict(cfg_file["model"]))
        data = build_dataset(sequences, spec, model.cfg, train_cfg.noise, train_cfg.realizations, train_cfg.seed)
        result = train_stage2(model, data, train_cfg, spec, out, callback=show)
        print(result.audit.line())
    outputs = [result.checkpoint, out / f"stage{args.stage}_loss.csv"]
    config = {"train": train_cfg.to_dict(), "model": asdict(result.model.cfg)}
    return config, {"train": train_cfg.seed}, list(args.data) + ([args.init] if args.init else []), outputs


def cmd_infer(args, spec):
    from .inference import PoseGenerator, mds_procrustes_baseline
    from .model import load_checkpoint

    stream = _read_stream(args.stream, spec)
    if stream.ndim != 3 or stream.shape[1:] != (len(spec.input_indices),) * 2:
        raise InvalidInputError(f"expected {len(spec.input_indices)}x{len(spec.input_indices)} matrices")
    out = _out_dir(args.out)
    if args.baseline:
        poses = mds_procrustes_baseline(stream, len(spec.sparse_indices), spec.anchor_targets).poses
        config = {"method": "mds_procrustes"}
    else:
        if not args.ckpt:
            raise UsageError("infer needs --ckpt unless --baseline is given")
        model, payload = load_checkpoint(args.ckpt)
        poses = PoseGenerator(model, spec, smoothing_sigma=args.smoothing).run(stream)
        config = {"method": "model", "stage": payload["stage"], "variant": model.cfg.variant, "smoothing": args.smoothing}
    path = out / "poses.txt"
    write_pose_stream(poses, path)
    print(f"wrote {len(poses)} poses to {path}")
    inputs = [args.stream] + ([args.ckpt] if args.ckpt and not args.baseline else [])
    return config, {}, inputs, [path]


def cmd_eval(args, spec):
    from .metrics import evaluate, sensor_layout

    gt = load_sequence(args.gt, spec)
    if not gt.has_anchors:
        gt = prepare(gt, spec)
    pred = read_pose_stream(args.pred)
    target, layout = gt.frames, spec
    if pred.shape[1] == len(spec.input_indices):
        # sensor-only prediction: score the sensor nodes
        target, layout = gt.frames[:, list(spec.input_indices)], sensor_layout(spec)
    elif pred.shape[1] < spec.num_joints:
        raise InvalidInputError(f"predicted poses have {pred.shape[1]} nodes, need {spec.num_joints}")
    report = evaluate(pred, target, layout, gt.fps, gt.scale)
    out = _out_dir(args.out)
    metrics_path, curves_path = out / "metrics.csv", out / "drift.csv"
    report.write_csv(metrics_path)
    report.write_curves(curves_path)
    print(", ".join(f"{k}={v:.4f}" for k, v in report.row().items() if np.isfinite(v)))
    return {"fps": gt.fps, "scale": gt.scale}, {}, [args.pred, args.gt], [metrics_path, curves_path]


def cmd_analyze(args, spec):
    stream = _read_stream(args.stream, spec)
    if len(stream) == 0:
        raise InvalidInputError("empty stream")
    ks = (1, 2, 3, 4, 5)
    reports = [eigen_report(d, ks) for d in stream]
    cev = np.array([[r.cev_at(k) for k in ks] for r in reports])
    tis = np.array([r.tis for r in reports])
    out = _out_dir(args.out)
    frames_path = out / "eigen.csv"
    header = ",".join(["frame"] + [f"cev{k}" for k in ks] + ["tis"])
    np.savetxt(frames_path, np.column_stack([np.arange(len(stream)), cev, tis]), delimiter=",",
               fmt=["%d"] + ["%.6f"] * (len(ks) + 1), header=header, comments="")
    edges = np.linspace(0.0, 1.0, args.bins + 1)
    hist_path = out / "histograms.csv"
    counts = [np.histogram(np.clip(v, 0, 1), edges)[0] for v in (cev[:, 2], tis)]
    np.savetxt(hist_path, np.column_stack([edges[:-1], edges[1:], *counts]), delimiter=",",
               fmt=["%.4f", "%.4f", "%d", "%d"], header="bin_lo,bin_hi,cev3_count,tis_count", comments="")
    print(f"CEV(3)={cev[:, 2].mean():.3f}  TIS={tis.mean():.3f}  frames={len(stream)}")
    return {"bins": args.bins}, {}, [args.stream], [frames_path, hist_path]


def build_parser():
    parser = argparse.ArgumentParser(prog="pwdmocap", description=__doc__.splitlines()[0])
    parser.add_argument("--lower-body", choices=("feet", "knees"), default="feet",
                        help="which lower-body joints carry sensors")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic motion clip")
    p.add_argument("--kind", default="walk", choices=("walk", "arm_swing", "squat", "turn", "figure8"))
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--fps", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="keep meters, no normalization or anchors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="add smoothed Gaussian ranging noise to a distance stream")
    p.add_argument("--in", dest="input", required=True, help="sequence file, matrix stream, or - for stdin")
    p.add_argument("--sigma", type=float, default=0.15)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="run stage-1 or stage-2 training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--data", nargs="+", required=True, help="sequence files")
    p.add_argument("--init", help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct poses from a distance stream")
    p.add_argument("--ckpt")
    p.add_argument("--stream", required=True, help="sequence file, matrix stream, or - for stdin")
    p.add_argument("--baseline", action="store_true", help="use per-frame MDS + anchor Procrustes")
    p.add_argument("--smoothing", type=float, default=1.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted poses against a ground-truth sequence")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="CEV / triangle-inequality diagnostics of a distance stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    spec = human_skeleton(args.lower_body)
    try:
        config, seeds, inputs, outputs = args.func(args, spec)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, InvalidInputError, DegenerateGeometryError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FreezeAuditError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_manifest(Path(args.out), args.command, config, seeds, inputs, outputs, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
