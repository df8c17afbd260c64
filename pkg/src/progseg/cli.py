"""Command line entry point: run, run-offline, synth, eval and timings."""

import argparse
import logging
import sys
from pathlib import Path

from . import benchmark, frame_io, metrics, pipeline
from .synthetic import generate_synthetic_sequence, read_scene_spec


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args):
    kv = _overrides(args.set)
    if args.output:
        kv["output"] = args.output
    return pipeline.PipelineConfig.load(args.config, kv)


def _print_summary(result, method):
    for name, m in (("accuracy", method), ("wiou", method), ("map50", "instance"),
                    ("instance_coverage", "instance")):
        try:
            v = result.metric(name, m)
        except KeyError:
            continue
        if v is not None:
            print(f"{name:<18} {v:.6f}")


def cmd_run(args):
    cfg = _config(args)
    result = pipeline.run(cfg)
    _print_summary(result, "crf")
    print(f"outputs written to {cfg.output}")
    return 0


def cmd_run_offline(args):
    cfg = _config(args)
    result = pipeline.run_offline(cfg, mesh_level=args.mesh)
    _print_summary(result, "offline_mesh" if args.mesh else "offline")
    print(f"outputs written to {cfg.output}")
    return 0


def cmd_synth(args):
    if args.scene in ("desk", "corridor", "training"):
        meta = benchmark.make_sequence(args.scene, args.out, args.frames, args.noise, args.seed)
    else:
        spec = read_scene_spec(args.scene)
        meta = generate_synthetic_sequence(spec, spec.trajectory, args.out)
    print(f"{args.out}: {benchmark.describe(meta)}")
    return 0


def cmd_eval(args):
    pred = frame_io.read_labeled_cloud(args.pred)
    gt = frame_io.read_labeled_cloud(args.gt)
    rows = metrics.evaluate_clouds(pred, gt, args.radius)
    scene = Path(args.pred).parent.name or "scene"
    rows = [(scene, "eval", *r) for r in rows if r[2] is not None]
    if args.csv:
        metrics.write_report(rows, args.csv)
    for _, _, name, cls, value in rows:
        print(f"{name:<18} {cls:<6} {value:.6f}")
    return 0


def cmd_timings(args):
    rep = pipeline.report_timings(pipeline.read_timings(args.log))
    print(pipeline.format_timing_report(rep))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="progseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, text in (("run", cmd_run, "stream a sequence through the online pipeline"),
                           ("run-offline", cmd_run_offline, "online pass, then one global CRF")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("-o", "--output")
        s.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. crf.theta_alpha=0.3")
        if name == "run-offline":
            s.add_argument("--mesh", action="store_true", help="per-voxel global CRF")
        s.set_defaults(func=fn)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("scene", help="scene file, or one of desk, corridor, training")
    s.add_argument("out")
    s.add_argument("--frames", type=int)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="score a labeled cloud against ground truth")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--radius", type=float, default=0.016)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("timings", help="summarize a timings log")
    s.add_argument("log")
    s.set_defaults(func=cmd_timings)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, pipeline.FrameError) as exc:
        print(f"progseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
