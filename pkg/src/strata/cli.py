"""Command-line driver: ``strata <stage> --config cfg.json [--out DIR] ...``.

Exit status is 0 on success, 1 for invalid input (bad config, unknown
subcommand, missing upstream artifact) and 2 for failures while a stage runs.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, PipelineConfig
from .pipeline import STAGES, MissingArtifact, Pipeline

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="strata", description="Stratified EHR risk-model pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in (*STAGES, "run"):
        helptext = "run every stage in order" if name == "run" else f"run the {name} stage"
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="pipeline config file (JSON)")
        p.add_argument("--out", help="output directory (overrides paths.output)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, help="threads for split search")
        p.add_argument("--paper-mode", action="store_true",
                       help="select features once on the full cohort")
        p.add_argument("--force", action="store_true", help="ignore cached stage output")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("STRATA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join((*STAGES, "run")))
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict({})
        cfg = cfg.with_overrides(seed=args.seed, output=args.out, paper_mode=args.paper_mode)
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be at least 1")
    except (UsageError, ConfigError) as exc:
        print(f"strata: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    pipeline = Pipeline(cfg, workers=args.workers)
    stages = STAGES if args.command == "run" else (args.command,)
    try:
        for stage in stages:
            pipeline.run_stage(stage, force=args.force)
    except (MissingArtifact, ConfigError) as exc:
        print(f"strata: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # any stage failure maps to one exit status
        logger.debug("stage failure", exc_info=True)
        print(f"strata: {stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if args.command in ("run", "report"):
        print(pipeline.stage_dir("report") / "report.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
