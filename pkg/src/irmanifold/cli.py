"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or missing inputs, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .io import ArtifactError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

COMMANDS = {
    "simulate": pipeline.run_simulate,
    "estimate-motion": pipeline.run_estimate_motion,
    "reconstruct": pipeline.run_reconstruct,
    "map-t1": pipeline.run_map_t1,
    "synth-cine": pipeline.run_synth_cine,
    "run-all": pipeline.run_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irmanifold", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
        p.add_argument("--out", type=Path, help="run directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="global seed (overrides seed)")
        p.add_argument("--stage-overrides", nargs="*", default=[], metavar="KEY=VAL",
                       help="dotted config overrides, e.g. recon.epochs=5")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.stage_overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out_dir={json.dumps(str(args.out))}")
    return apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg, Path(cfg.out_dir))
    except (ConfigError, pipeline.StageInputError, ArtifactError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, RuntimeError, FloatingPointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, sort_keys=True, indent=2, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
