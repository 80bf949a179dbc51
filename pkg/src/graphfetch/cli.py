"""Command-line entry point: ``python -m graphfetch.cli <subcommand> --config run.toml``."""

from __future__ import annotations

import argparse
import logging
import sys

from graphfetch import pipeline
from graphfetch.config import PREFETCHERS, ConfigError, load_config, parse_override
from graphfetch.nn import CheckpointError
from graphfetch.trace import TraceError
from graphfetch.training import TrainingError


def _prefetcher_list(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in PREFETCHERS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown prefetcher(s) {bad}; choose from {list(PREFETCHERS)}")
    return names


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphfetch", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="TOML run configuration")
    common.add_argument("--seed", type=_u64, help="override the global seed")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-trace", parents=[common], help="write the synthetic trace")
    p = sub.add_parser("train", parents=[common], help="train phase-specific delta and page models")
    p.add_argument("--resume", action="store_true", help="continue from the saved models")
    sub.add_parser("distill", parents=[common], help="distill the trained models into students")
    p = sub.add_parser("quantize", parents=[common], help="8-bit quantize a model set")
    p.add_argument("--source", default="models", choices=("models", "students"))
    sub.add_parser("detect-bench", parents=[common], help="precision/recall of the phase detectors")
    p = sub.add_parser("simulate", parents=[common], help="cache simulation per prefetcher")
    p.add_argument("--prefetcher", type=_prefetcher_list, help="comma-separated subset of " + ",".join(PREFETCHERS))
    p.add_argument("--models", default="models", help="model directory under the output root")
    p = sub.add_parser("report", help="comparison table of report files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of an aligned table")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            render = pipeline.render_csv if args.csv else pipeline.render_report
            print(render(args.reports), end="")
            return 0
        overrides = dict(parse_override(s) for s in args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        if args.command == "gen-trace":
            print(pipeline.gen_trace(cfg))
        elif args.command == "train":
            models = pipeline.train(cfg, resume=args.resume)
            for tag, curve in sorted(models.losses.items()):
                print(f"{tag}: final loss {curve[-1]:.6f} after {len(curve)} epochs")
        elif args.command == "distill":
            pipeline.distill_step(cfg)
            print(pipeline.model_dir(cfg, "students"))
        elif args.command == "quantize":
            print(pipeline.quantize_step(cfg, args.source).read_text(), end="")
        elif args.command == "detect-bench":
            print(pipeline.detect_bench(cfg).read_text(), end="")
        elif args.command == "simulate":
            paths = pipeline.simulate_step(cfg, args.prefetcher, args.models)
            print(pipeline.render_report(paths), end="")
    except (ConfigError, pipeline.PipelineError, CheckpointError, TraceError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
