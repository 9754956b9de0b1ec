"""Command-line entry point.

Verbs: gen-data, pretrain-diffusion, train, eval, ablate, analyze-errors.
Errors print a one-line JSON record to stderr and exit nonzero so scripted
callers can parse failures.

Environment: DIFFTEACH_OUTPUT_ROOT overrides the config's output root;
DIFFTEACH_THREADS caps torch CPU threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import torch

from .config import ExperimentConfig
from . import harness


def _load_config(path):
    return ExperimentConfig.from_json(path)


def _out_dir(args, config, default_leaf):
    if args.out:
        return args.out
    root = os.environ.get("DIFFTEACH_OUTPUT_ROOT", config.output_root)
    return os.path.join(root, default_leaf)


def cmd_gen_data(args):
    config = _load_config(args.config)
    out = _out_dir(args, config, "data")
    paths = harness.run_gen_data(config, out)
    print(json.dumps({"written": sorted(paths.values())}, indent=1))


def cmd_pretrain(args):
    config = _load_config(args.config)
    out = _out_dir(args, config, "pretrain")
    ckpt = harness.run_pretrain(config, args.data, out)
    print(json.dumps({"denoiser": ckpt}))


def cmd_train(args):
    config = _load_config(args.config)
    if args.mode == "diffusion_teacher":
        if not args.denoiser:
            raise ValueError("mode diffusion_teacher needs --denoiser")
        out = _out_dir(args, config, "teacher")
        ckpt = harness.run_train_teacher(config, args.data, args.denoiser, out)
        print(json.dumps({"teacher": ckpt}))
        return
    out = _out_dir(args, config, args.mode)
    summary = harness.run_train(
        config,
        args.mode,
        args.data,
        out,
        teacher_path=args.teacher,
        resume=args.resume,
    )
    print(json.dumps(summary, sort_keys=True))


def cmd_eval(args):
    report = harness.run_eval(args.checkpoint, args.dataset, args.out)
    print(json.dumps({"map": report.map, "report": args.out}))


def cmd_ablate(args):
    config = _load_config(args.config)
    values = None
    if args.values:
        grid_type = {"lambda": float, "sigma": float, "steps": int}.get(args.param, str)
        values = [grid_type(v) for v in args.values]
    out = _out_dir(args, config, f"ablate_{args.param}")
    rows = harness.run_ablate(
        config,
        args.param,
        values,
        args.data,
        out,
        teacher_path=args.teacher,
        denoiser_path=args.denoiser,
    )
    print(json.dumps(rows, sort_keys=True))


def cmd_analyze_errors(args):
    report = harness.run_analyze_errors(
        args.checkpoint, args.dataset, args.out, score_min=args.score_min
    )
    print(json.dumps({"taxonomy": report.taxonomy, "missed_gt": report.missed_gt}, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="diffteach", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the two-domain benchmark")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_gen_data)

    pr = sub.add_parser("pretrain-diffusion", help="pretrain the denoiser on both domains")
    pr.add_argument("--config", required=True)
    pr.add_argument("--data", required=True, help="directory written by gen-data")
    pr.add_argument("--out", default=None)
    pr.set_defaults(fn=cmd_pretrain)

    t = sub.add_parser("train", help="train the teacher, the baseline, or a self-training variant")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument(
        "--mode",
        required=True,
        choices=["baseline", "ddt", "no_mean_teacher", "no_diffusion_teacher", "no_teacher", "diffusion_teacher"],
    )
    t.add_argument("--denoiser", default=None, help="denoiser checkpoint (diffusion_teacher mode)")
    t.add_argument("--teacher", default=None, help="teacher checkpoint (ddt / no_mean_teacher)")
    t.add_argument("--out", default=None)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a detector checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one knob and tabulate final mAP")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--param", required=True, choices=sorted(harness.ABLATION_GRIDS))
    a.add_argument("--values", nargs="*", default=None)
    a.add_argument("--teacher", default=None)
    a.add_argument("--denoiser", default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_ablate)

    er = sub.add_parser("analyze-errors", help="error taxonomy, confusion matrix, PR curves")
    er.add_argument("--checkpoint", required=True)
    er.add_argument("--dataset", required=True)
    er.add_argument("--out", required=True)
    er.add_argument("--score-min", type=float, default=0.5)
    er.set_defaults(fn=cmd_analyze_errors)
    return p


def main(argv=None):
    threads = os.environ.get("DIFFTEACH_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # noqa: BLE001 - turn into a machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
