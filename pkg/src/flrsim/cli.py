"""Command line entry point.

    flrsim run CONFIG [--seed S] [--out DIR] [--preset NAME] [--resume]
    flrsim validate CONFIG
    flrsim compare DIR DIR [...] [--csv PATH]

Exit status: 0 success, 2 invalid configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import PRESETS, ExperimentConfig, ValidationError, parse_and_validate
from .errors import ConfigurationError, FLRError
from .runner import compare, run

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _load(path: str, args) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    overrides = {
        "seed": getattr(args, "seed", None),
        "output_dir": getattr(args, "out", None),
        "method": getattr(args, "preset", None),
    }
    return parse_and_validate(text, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flrsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    p_run.add_argument("--preset", choices=sorted(PRESETS))
    p_run.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")

    p_val = sub.add_parser("validate", help="check a config file and print the resolved settings")
    p_val.add_argument("config")

    p_cmp = sub.add_parser("compare", help="summarize completed runs side by side")
    p_cmp.add_argument("dirs", nargs="+")
    p_cmp.add_argument("--csv", help="also write the summary as CSV to this path")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            cfg = _load(args.config, args)
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        elif args.command == "run":
            cfg = _load(args.config, args)
            manifest = run(cfg, resume=args.resume)
            print(f"wrote {manifest.artifacts['manifest']} ({manifest.wall_clock_seconds:.1f}s)")
        elif args.command == "compare":
            text, csv_text, _ = compare([Path(d) for d in args.dirs])
            print(text)
            if args.csv:
                Path(args.csv).write_text(csv_text, encoding="utf-8")
    except ValidationError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME if args.command == "compare" else EXIT_INVALID
    except (FLRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
