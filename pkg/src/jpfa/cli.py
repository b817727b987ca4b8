"""Command line entry point: ``jpfa {gen-data,run,eval,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .pipeline import ExperimentConfig, Run

log = logging.getLogger("jpfa")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _phases(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def cmd_gen_data(args) -> dict:
    return pipeline.gen_data(Run(_config(args), args.out), force=args.force)


def cmd_run(args) -> dict:
    run = Run(_config(args), args.out)
    phases = _phases(args.phases)
    if args.no_pixel and "pixel" in phases:
        phases.remove("pixel")
    return pipeline.run_phases(run, phases, no_pixel=args.no_pixel)


def cmd_eval(args) -> dict:
    return pipeline.evaluate(Run(_config(args), args.out), args.mode, no_pixel=args.no_pixel)


def cmd_ablate(args) -> dict:
    cfg = _config(args)
    seeds = [args.seed] if args.seed is not None else None
    path = pipeline.ablate(cfg, args.out, args.grid, seeds=seeds, force=args.force)
    return {"table": str(path)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jpfa", description="Cross-domain hashing experiments on a synthetic benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="recompute artifacts that already exist")

    p = sub.add_parser("gen-data", help="export the synthetic benchmark as PGM folders")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="train the requested phases")
    common(p)
    p.add_argument("--phases", default=",".join(pipeline.PHASES), help="comma list of pretrain,pixel,feature")
    p.add_argument("--no-pixel", action="store_true", help="feature phase on untranslated source copies")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score the trained heads and the source-only baseline")
    common(p)
    p.add_argument("--mode", choices=("identify", "verify", "both"), default="both")
    p.add_argument("--no-pixel", action="store_true", help="use untranslated source copies as the fake gallery")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="feature-phase grid over loss terms or beta")
    common(p)
    p.add_argument("--grid", choices=("losses", "beta"), required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    marker = out / f"{args.command}.failed"
    try:
        result = args.func(args)
    except (pipeline.PipelineError, ValueError, KeyError, OSError, RuntimeError) as exc:
        try:
            out.mkdir(parents=True, exist_ok=True)
            marker.write_text(f"{type(exc).__name__}: {exc}\n")
        except OSError:
            pass
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if marker.exists():
        marker.unlink()
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
