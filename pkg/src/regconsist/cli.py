"""Command-line entry point: ``regconsist <stage> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .io import FormatError
from .pipeline import AXES, STAGES, DependencyError, run_ablation, run_all, run_stage
from .ssl.pretrain import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERICAL = 4

DEFAULT_ABLATION_VALUES = {
    "strategy": ["random-exact", "balanced-exact", "random-region", "balanced-region"],
    "iou_band": ["0.3,0.7", "0.7,0.9"],
    "fraction": ["0.05", "0.1", "0.2", "0.3"],
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", default=None, help="experiment directory (default: $REGCONSIST_WORKDIR or ./regconsist-work)")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--force", action="store_true", help="re-run even when outputs are up to date")
    p.add_argument("--jobs", type=int, default=1, help="cap on worker processes")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regconsist", description="Region-consistent pixel-pair pre-training pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        if stage == "genworld":
            p.add_argument("--seed", type=int, help="scene seed")
            p.add_argument("--objects", type=int, help="number of objects in the scene")
            p.add_argument("--out", help="directory for the rendered frames and manifest")
            p.add_argument("--manifest", help="use an existing dataset manifest instead of rendering")
        if stage == "pair-select":
            p.add_argument("--iou-low", type=float)
            p.add_argument("--iou-high", type=float)
        if stage == "segment":
            p.add_argument("--source", choices=("graph", "labels"))
            p.add_argument("--scale", type=float)
            p.add_argument("--sigma", type=float)
            p.add_argument("--min-size", type=int)
        if stage == "match-regions":
            p.add_argument("--tau", type=float, help="region IoU threshold")
        if stage in ("sample-pairs", "pretrain"):
            p.add_argument("--strategy")
            p.add_argument("--pairs", type=int, help="pairs per batch |S|")
            p.add_argument("--seed", type=int)
        if stage == "pretrain":
            p.add_argument("--iters", type=int)
        if stage == "finetune":
            p.add_argument("--init", help="'pretrain' (default), 'random' or a checkpoint path")
            p.add_argument("--fraction", type=float)
            p.add_argument("--seed", type=int)
            p.add_argument("--mode", choices=("full", "linear"))
        if stage == "eval":
            p.add_argument("--report", help="also copy the report JSON here")
            p.add_argument("--overlays", type=int, help="write this many prediction overlays (PPM)")
    p = sub.add_parser("run-all", help="run every stage in order")
    _common(p)
    p = sub.add_parser("ablate", help="sweep one axis and write a CSV of mIoU per seed")
    _common(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", nargs="+", help="axis values (iou_band as 'lo,hi')")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", help="CSV path (default: <workdir>/ablate/<axis>.csv)")
    return parser


def _overrides(args) -> dict:
    cmd = args.command
    o = {}
    seed = getattr(args, "seed", None)
    if cmd == "genworld":
        o["dataset.seed"] = seed
        o["dataset.manifest"] = args.manifest
        o["dataset.n_objects"] = args.objects
        o["dataset.out"] = args.out
    elif cmd == "pair-select":
        o["pairing.iou_l"] = args.iou_low
        o["pairing.iou_h"] = args.iou_high
    elif cmd == "segment":
        o["regions.source"] = args.source
        o["regions.scale"] = args.scale
        o["regions.sigma"] = args.sigma
        o["regions.min_size"] = args.min_size
    elif cmd == "match-regions":
        o["matching.tau_region"] = args.tau
    elif cmd in ("sample-pairs", "pretrain"):
        o["sampling.strategy"] = args.strategy
        o["sampling.pairs_per_batch"] = args.pairs
        o["sampling.seed"] = seed
        if cmd == "pretrain":
            o["ssl.seed"] = seed
            o["ssl.total_iters"] = args.iters
    elif cmd == "finetune":
        o["supervise.init"] = args.init
        o["supervise.fraction"] = args.fraction
        o["supervise.seed"] = seed
        o["supervise.mode"] = args.mode
    elif cmd == "eval":
        o["supervise.overlays"] = args.overlays
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    workdir = Path(args.workdir or os.environ.get("REGCONSIST_WORKDIR") or "regconsist-work")
    try:
        config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        config = config.with_overrides(**_overrides(args))
        if args.command == "run-all":
            for r in run_all(config, workdir, force=args.force, jobs=args.jobs):
                print(f"{r.stage}: {r.status}")
        elif args.command == "ablate":
            values = args.values or DEFAULT_ABLATION_VALUES[args.axis]
            out = Path(args.out) if args.out else workdir / "ablate" / f"{args.axis}.csv"
            rows = run_ablation(config, args.axis, values, workdir, seeds=args.seeds, csv_path=out, force=args.force, jobs=args.jobs)
            for row in rows:
                print(f"{row['value']}: mean mIoU {row['mean']:.4f}")
            print(f"wrote {out}")
        else:
            r = run_stage(args.command, config, workdir, force=args.force, jobs=args.jobs)
            print(f"{r.stage}: {r.status} ({r.outdir})")
            if args.command == "eval":
                report = r.outdir / "report.json"
                if args.report:
                    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
                    Path(args.report).write_bytes(report.read_bytes())
                print(f"mIoU {json.loads(report.read_text())['miou']:.4f}")
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
