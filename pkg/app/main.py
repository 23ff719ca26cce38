"""
Entry point: `python -m app.main <group> <command> [options]`.
"""

import argparse
import logging
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from app import __version__
from app.cli import COMMANDS, apply_overrides, run_command
from app.config import describe_validation_error, load_run_config, settings
from app.errors import GeometryError

logger = logging.getLogger("app")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (or a JSON config snapshot)")
    common.add_argument("--out", help="output directory (overrides OUTPUT_ROOT and output_dir)")
    common.add_argument("--seed", type=int, help="master seed applied to every stage")
    common.add_argument("--variant", choices=["ucg", "wcg", "custom"], help="dataset variant")

    parser = argparse.ArgumentParser(prog="riemann-ebm", description="EBM-derived Riemannian metrics and geodesics")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    groups = parser.add_subparsers(dest="group", required=True)
    for group, commands in COMMANDS.items():
        sub = groups.add_parser(group).add_subparsers(dest="command", required=True)
        for name in commands:
            cmd = sub.add_parser(name, parents=[common])
            if group == "geodesic" or (group == "eval" and name == "run"):
                cmd.add_argument("--metric", help="restrict to one metric from metrics.selection")
            if group == "eval" and name == "sweep":
                cmd.add_argument("--family", choices=["land", "rbf"], default="land")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    options = {k: getattr(args, k) for k in ("metric", "family") if getattr(args, k, None) is not None}
    try:
        config = apply_overrides(load_run_config(args.config), seed=args.seed, variant=args.variant)
        run_command(args.group, args.command, config, out=args.out, options=options)
    except ValidationError as e:
        logger.error(f"❌ Invalid config: {describe_validation_error(e)}")
        return 2
    except GeometryError as e:
        logger.error(f"❌ {e.detail}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
