"""``asgm`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 I/O or dataset error.  ``ASGM_LOG`` (error, info, debug) sets verbosity.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from ..errors import ConfigError, DatasetError, DivergenceError, FormatError, TrainingDivergedError
from .commands import COMMANDS
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("asgm")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asgm", description="Anisotropic SPDE score-based generative models.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    return p


def _setup_logging():
    level = os.environ.get("ASGM_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        log.error("ASGM_LOG=%s not understood; using error", level)


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, _, v = item.partition("=")
            overrides[k.strip()] = v.strip()
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            overrides["seed"] = str(args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            overrides["threads"] = str(args.threads)
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        paths = COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, TrainingDivergedError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for p in paths:
        log.info("wrote %s", p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
