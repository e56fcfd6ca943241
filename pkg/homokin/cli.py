import argparse
import logging
import sys
from typing import List, Optional

from homokin import harness
from homokin.errors import HomokinError

logger = logging.getLogger("homokin")

LEVELS = ("omd", "meanfield", "dsmc", "hydro", "compare")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED = 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homokin", description="homoenergetic kinetic theory experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    for level in LEVELS:
        p = sub.add_parser(level, help=f"run a {level} experiment")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set dsmc.n_sim=20000")
        p.add_argument("--max-workers", type=int, default=1, help="threads for ensemble members")
        p.add_argument("--verbose", action="store_true", help="debug logging")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--verbose", action="store_true", help="debug logging")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    if args.command == "serve":
        import uvicorn

        uvicorn.run("homokin.main:app", host=args.host, port=args.port)
        return EXIT_OK

    try:
        config = harness.load_config(args.config, [f"level={args.command}"] + args.overrides)
        manifest = harness.run(config, max_workers=args.max_workers)
    except HomokinError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_ERROR
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_ERROR

    logger.info(f"outputs in {config.output_dir}: {', '.join(manifest.files)}")
    if manifest.passed is False:
        logger.error(f"run {manifest.run_id} did not pass")
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
