"""Run every shipped configuration through the CLI and summarize the checks.

Usage: python scripts/run_all.py [--out results] [--workers 1]
"""

import argparse
import glob
import json
import os
import sys

from stochmaxwell.cli import main as cli_main

COMMANDS = {
    "converge_time": "converge-time",
    "converge_space": "converge-space",
    "converge_full": "converge-full",
    "divergence": "divergence-check",
    "energy": "energy",
    "ldp_gap": "ldp-gap",
    "export_vtk": "export-vtk",
}


def command_for(name):
    for prefix, cmd in COMMANDS.items():
        if name.startswith(prefix):
            return cmd
    raise KeyError(name)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--configs", default=os.path.join(os.path.dirname(__file__), "..", "configs"))
    args = parser.parse_args()
    worst = 0
    for path in sorted(glob.glob(os.path.join(args.configs, "*.ini"))):
        name = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(args.out, name)
        print(f"== {name}")
        code = cli_main([command_for(name), "--config", path, "--out", out, "--workers", str(args.workers)])
        worst = max(worst, code)
        with open(os.path.join(out, "result.json")) as fh:
            fits = json.load(fh)["fits"]
        for key, fit in fits.items():
            print(f"   {key}: slope {fit['slope']:.3f} (log residual {fit['residual']:.2g})")
    return worst


if __name__ == "__main__":
    sys.exit(main())
