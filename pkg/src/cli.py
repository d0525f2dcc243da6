"""Command-line entry point: ``python -m src.cli <subcommand> --config FILE``.

Exit codes: 0 success, 1 configuration error, 2 any other failure.
"""
from __future__ import annotations
import argparse, logging, sys
from typing import Any, Dict, List, Optional

from . import runner
from .config import RunConfig, load_config, parse_config
from .errors import ConfigError
from .guidance import METHODS, TARGET_SHAPES
from .utils import read_manifest

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("train-teacher", "distill", "sample", "eval", "guide", "ablate-distance")
# flags stored in the manifest so a rerun sees the same inputs
RECORDED_FLAGS = ("teacher", "student", "plot", "target_shape", "method")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpdistill", description="Consistency-trajectory distillation on toy mixtures")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="YAML run config")
        src.add_argument("--manifest", help="manifest.json of an earlier run to replay")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        p.add_argument("--plot", action="store_true", default=None, help="also write SVG figures")
        if name in ("distill", "eval", "ablate-distance"):
            p.add_argument("--teacher", help="teacher checkpoint (teacher.kind = neural)")
        if name in ("sample", "eval", "guide"):
            p.add_argument("--student", help="student checkpoint")
        if name == "guide":
            p.add_argument("--target-shape", choices=TARGET_SHAPES)
            p.add_argument("--method", choices=METHODS)
    return parser


def resolve(args: argparse.Namespace) -> tuple[RunConfig, Dict[str, Any]]:
    given = {k: getattr(args, k, None) for k in RECORDED_FLAGS}
    if args.manifest:
        raw, seed, flags = read_manifest(args.manifest)
        raw = dict(raw, seed=seed)
        cfg = parse_config(raw)
        flags.update({k: v for k, v in given.items() if v is not None})
    else:
        cfg = load_config(args.config)
        flags = given
    flags = {k: flags.get(k) for k in RECORDED_FLAGS}
    flags["plot"] = bool(flags["plot"])
    return cfg, flags


def dispatch(run: runner.Run) -> List:
    f = run.flags
    cmd = run.subcommand
    if cmd == "train-teacher":
        return runner.run_train_teacher(run)
    if cmd == "distill":
        return runner.run_distill(run, f["teacher"])
    if cmd == "sample":
        return runner.run_sample(run, f["student"])
    if cmd == "eval":
        return runner.run_eval(run, f["student"], f["teacher"])
    if cmd == "guide":
        return runner.run_guide(run, f["student"], f["target_shape"], f["method"])
    return runner.run_ablate_distance(run, f["teacher"])


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="[%(name)s] %(levelname)s %(message)s")
    try:
        cfg, flags = resolve(args)
        run = runner.start_run(cfg, args.subcommand, flags)
        paths = dispatch(run)
        run.finish()
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return 1
    except Exception:
        logger.exception("%s failed", args.subcommand)
        return 2
    for p in paths:
        logger.info("wrote %s", p)
    print(run.run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
