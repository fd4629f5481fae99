#!/usr/bin/env python3
"""Run a set of baselines on the desk task and print a comparison table.

Stages shared between baselines (source segmenter, translation networks,
pseudo-labels) are trained once per (fold, seed) and reused via the stage
cache, so running the whole matrix costs far less than eight independent
pipelines.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from hetseg.config import load_config
from hetseg.experiments import StageCache, run_experiment
from hetseg.pipelines import BASELINE_LABELS

DEF_BASELINES = "i,ii,iv,v,vi,vii,viii"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--run-root", default="runs/matrix")
    parser.add_argument("--config", default=None)
    parser.add_argument("--baselines", default=DEF_BASELINES,
                        help="comma-separated baseline ids (iii needs --adapter)")
    parser.add_argument("--adapter", action="store_true",
                        help="allow the 1x1 channel adapter for baseline iii")
    parser.add_argument("--seeds", default=None, help="comma-separated seeds")
    args = parser.parse_args()

    cfg = load_config(args.config)
    cache = StageCache()
    rows = []
    for baseline in [b.strip() for b in args.baselines.split(",") if b.strip()]:
        plan = cfg.make_plan(baseline=baseline)
        if args.seeds:
            plan = replace(plan, seeds=tuple(int(s) for s in args.seeds.split(",")))
        if args.adapter:
            plan = replace(plan, allow_channel_adapter=True)
        report = run_experiment(plan, out_root=args.run_root, cache=cache)
        rows.append((baseline, report.aggregate))

    print(f"\n{'baseline':<10} {'label':<44} {'recall':>14} {'precision':>14} "
          f"{'dsc':>14} {'ap':>14}")
    for baseline, agg in rows:
        cells = " ".join(
            f"{agg[m]['mean']:.3f} ({agg[m]['std']:.3f})".rjust(14)
            for m in ("recall", "precision", "dsc", "ap")
        )
        print(f"{baseline:<10} {BASELINE_LABELS[baseline]:<44} {cells}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
