"""Command-line entry point: ``nvsqueeze <kind> --config FILE [--seed N] [--threads N] [--out DIR]``.

Exit codes: 0 success, 2 invalid configuration or capacity, 3 numerical
failure (convergence, integration, fitting or mapping).
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources

from . import __version__
from .config import KINDS, load_config, parse_config
from .errors import (
    CapacityError,
    ConfigError,
    ConvergenceError,
    ExtrapolationError,
    FitError,
    IntegrationError,
    MapConstructionError,
    UndefinedSqueezingError,
)
from .runner import run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (
    ConvergenceError,
    IntegrationError,
    FitError,
    MapConstructionError,
    ExtrapolationError,
    UndefinedSqueezingError,
    FloatingPointError,
)

log = logging.getLogger("nvsqueeze")


def recipe_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("nvsqueeze.recipes").iterdir() if p.name.endswith(".yaml"))


def load_recipe(name: str):
    import yaml

    path = resources.files("nvsqueeze.recipes") / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown recipe {name!r}; available: {', '.join(recipe_names())}")
    return parse_config(yaml.safe_load(path.read_text()))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nvsqueeze", description="Squeezing simulations of disordered dipolar spin ensembles."
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="YAML or JSON run configuration")
        src.add_argument("--recipe", help="built-in configuration name")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for realizations")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("recipes", help="list built-in configurations")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.kind == "recipes":
        print("\n".join(recipe_names()))
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else load_recipe(args.recipe)
        if cfg.kind != args.kind:
            raise ConfigError(f"config is a {cfg.kind!r} experiment, not {args.kind!r}", ("kind",))
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", ("seed",))
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = cfg.with_overrides(seed=args.seed, out=args.out)
        res = run(cfg, threads=args.threads)
    except (ConfigError, CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("wrote %s", ", ".join(sorted(res.files)))
    print(res.out_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
