"""Command-line driver: ``stochmaxwell <experiment> --config FILE [--out DIR]``.

Exit codes: 0 all checks passed, 2 a threshold check failed, 1 error
(bad configuration, solver failure, ...).
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import ConfigError, load_config
from .experiments import EXPERIMENTS, ExperimentError, export_vtk

log = logging.getLogger("stochmaxwell")

EXIT_OK, EXIT_ERROR, EXIT_THRESHOLD = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochmaxwell", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(EXPERIMENTS) + ["export-vtk"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", default=None, help="output directory (default: [output] directory)")
        p.add_argument("--workers", type=int, default=None, help="override [mc] workers")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.workers is not None:
            cfg = cfg.with_updates(mc={"workers": args.workers})
        out = args.out or cfg.output.directory
        if args.command == "export-vtk":
            result = export_vtk(cfg, out)
        else:
            result = EXPERIMENTS[args.command](cfg)
        result.write(out)
    except (ConfigError, ExperimentError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} = {c.value:.6g} (required {c.threshold})")
    print(f"results written to {out}")
    return EXIT_OK if result.passed else EXIT_THRESHOLD


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
