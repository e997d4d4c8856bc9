"""Command-line entry point: ``vorvq <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .gradcheck import gradcheck_all


def _cmd_train(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    result = harness.train(cfg)
    print(json.dumps(result.final.row()))
    print(f"wrote {result.output_dir}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    rows = harness.ablate(cfg)
    for row in rows:
        print(",".join(f"{k}={harness.format_value(v)}" for k, v in row.items()))
    print(f"wrote {cfg.output_dir}/ablation.csv")
    return 0


def _cmd_eval(args) -> int:
    metrics = harness.eval_disentangle(args.bundle, seed=args.seed, eval_frames=args.frames)
    print(json.dumps(metrics))
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck_all(n_points=args.points, seed=args.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        print(f"failed ops: {', '.join(report.failures)}", file=sys.stderr)
        return 1
    return 0


def _cmd_export(args) -> int:
    books = harness.export_codebooks(args.bundle, args.out)
    print(f"wrote {len(books)} codebooks to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vorvq", description="Variance-ordered residual VQ toy experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ablate", help="train continuous, rvq and vo_rvq variants")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("eval-disentangle", help="cluster enhanced vs noise-stage embeddings")
    p.add_argument("--bundle", required=True, help="run directory, model.json or model.vorvq")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None, help="override the evaluation frame count")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-codebooks", help="dump bundle codebooks to CSV")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, harness.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
