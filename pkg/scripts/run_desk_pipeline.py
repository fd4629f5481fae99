#!/usr/bin/env python3
"""Run the full desk-scale pipeline stage by stage.

Equivalent to chaining the CLI subcommands; useful as a library-level
walkthrough. Writes everything under --run-root (default runs/desk).
"""

from __future__ import annotations

import argparse
import sys
import time

from hetseg.cli import main as cli_main

STAGES = ("gen-data", "train-source", "train-translation", "pseudo-label",
          "train-target", "evaluate")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--run-root", default="runs/desk")
    parser.add_argument("--config", default=None)
    parser.add_argument("--preset", default=None, choices=["desk", "paper"])
    args = parser.parse_args()

    common = ["--run-root", args.run_root]
    if args.config:
        common += ["--config", args.config]
    if args.preset:
        common += ["--preset", args.preset]

    t0 = time.monotonic()
    for stage in STAGES:
        print(f"== {stage}")
        code = cli_main([stage, *common])
        if code != 0:
            print(f"stage {stage} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"pipeline finished in {(time.monotonic() - t0) / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
