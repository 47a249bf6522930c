"""Command-line entry point: ``subnetkit <command> --config cfg.json``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import ConfigError, IntegrityError, PipelineConfig, PrerequisiteError, Run

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_INTEGRITY = 4

COMMANDS = ("pretrain", "calibrate-depth", "calibrate-width", "finetune", "extract", "search", "profile", "eval")

log = logging.getLogger("subnetkit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subnetkit", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="pipeline config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output root; the run lives in <out>/<config-hash>")
    p.add_argument("--corpus", help="plain-text corpus file (default: bundled toy corpus)")
    p.add_argument("--facts", help="two-column TSV of subject/object facts (default: bundled)")
    p.add_argument("--depth", type=int)
    p.add_argument("--width-ratio", type=float)
    p.add_argument("--budget", type=float)
    p.add_argument("--constraint", default="max-params", choices=("max-params", "max-flops", "max-latency-ms"))
    p.add_argument("--metric", choices=("ppl", "facts"))
    p.add_argument("--max-remove", type=int, help="calibrate-depth: largest removal budget M")
    p.add_argument("--runs", type=int, default=20, help="profile: timed runs per shape")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _need(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_")) is None:
            raise ConfigError(f"--{n}", f"required by '{args.command}'")


def dispatch(args) -> int:
    cfg = PipelineConfig.load(args.config, {"seed": args.seed, "out": args.out, "corpus": args.corpus, "facts": args.facts})
    run = Run(cfg)
    cmd = args.command
    if cmd == "pretrain":

        def progress(step, loss):
            if step % 100 == 0:
                log.info("pretrain step %d loss %.4f", step, loss)

        print(run.run_pretrain(progress))
    elif cmd == "calibrate-depth":
        print(run.run_calibrate_depth(args.max_remove, args.metric))
    elif cmd == "calibrate-width":
        print(run.run_calibrate_width())
    elif cmd == "finetune":

        def progress(step, sl):
            if step % 100 == 0:
                log.info("finetune step %d L1 %.4f total %.4f", step, sl.l1, sl.total)

        print(run.run_finetune(progress))
    elif cmd == "extract":
        _need(args, "depth", "width-ratio")
        print(run.run_extract(args.depth, args.width_ratio))
    elif cmd == "search":
        _need(args, "budget")
        print(run.run_search(args.constraint, args.budget, args.metric))
    elif cmd == "profile":
        print(run.run_profile(runs=args.runs))
    elif cmd == "eval":
        _need(args, "depth", "width-ratio")
        print(json.dumps(run.evaluate(args.depth, args.width_ratio), indent=1))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
