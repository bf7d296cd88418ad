"""``decifr`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 2 config error, 3 run collision, 4 stage ordering
violation, 1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import DecifrError, InvalidConfigError

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_COLLISION, EXIT_ORDER = 0, 1, 2, 3, 4

COMMANDS = {
    "generate-data": ("data", "synthesise the per-scenario datasets"),
    "train-fl": ("fl", "run FedAvg and persist the intercepted updates"),
    "attack": ("gia", "run the guided gradient-inversion grid"),
    "evaluate": ("mia", "binarise, score and classify reconstructions"),
    "report": ("report", "write markdown tables and figures"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decifr", description="Federated gradient-inversion membership lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config file (YAML)")
        p.add_argument("--run-id", help="run directory name (defaults to the config's run_id)")
        p.add_argument("--force", action="store_true", help="redo the stage; replace a run whose config changed")
        p.add_argument("--workers", type=int, default=1, help="parallel attack workers (attack stage)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_command(args) -> int:
    stage = COMMANDS[args.command][0]
    if args.workers < 1:
        raise InvalidConfigError("--workers must be >= 1")
    cfg = load_config(args.config) if args.config else None
    if stage == "data" and cfg is None and not args.run_id:
        raise InvalidConfigError("generate-data needs --config")
    run = pipeline.open_run(cfg, args.run_id, force=args.force, create=stage == "data")
    if stage == "data":
        pipeline.stage_data(run, force=args.force)
    elif stage == "fl":
        pipeline.stage_fl(run, force=args.force)
    elif stage == "gia":
        pipeline.stage_gia(run, force=args.force, workers=args.workers)
    elif stage == "mia":
        pipeline.stage_mia(run, force=args.force)
    else:
        path = pipeline.stage_report(run, force=args.force)
        print(path or run.root / "report" / "report.md")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except InvalidConfigError as exc:
        print(f"decifr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.CollisionError as exc:
        print(f"decifr: collision: {exc}", file=sys.stderr)
        return EXIT_COLLISION
    except pipeline.OrderingError as exc:
        print(f"decifr: ordering: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except DecifrError as exc:
        print(f"decifr: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        logging.getLogger(__name__).exception("internal failure")
        print(f"decifr: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
