#!/usr/bin/env python3
"""Sweep the fraction of labeled target patients and plot the curves."""

from __future__ import annotations

import argparse
import sys

from hetseg.config import load_config
from hetseg.experiments import StageCache, sweep_supervision


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--run-root", default="runs/sweep")
    parser.add_argument("--config", default=None)
    parser.add_argument("--fractions", default="0,0.25,0.5,1.0")
    args = parser.parse_args()

    cfg = load_config(args.config)
    fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    plan = cfg.make_plan(baseline="viii")
    series = sweep_supervision(fractions, plan, out_root=args.run_root,
                               cache=StageCache())
    for entry in series.entries:
        agg = entry.report.aggregate["dsc"]
        print(f"f={entry.fraction:<5g} {entry.method:<12} "
              f"dsc {agg['mean']:.3f} (+/- {agg['std']:.3f})")
    print(f"curves and CSV written under {args.run_root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
