#!/usr/bin/env python3
"""Change-detection grid: PCC1/PCC2 per (change fraction, noise variance) cell on fresh synthetic pairs.

Usage: python scripts/run_change_experiment.py --checkpoint runs/seg/model.uncd --pairs 20
"""
import argparse
import json
import time
from pathlib import Path

from uncd.changedet import DEFAULT_EPSILON_CHANGE, DEFAULT_THRESHOLDS, ThresholdSchedule
from uncd.checkpoint import load_checkpoint
from uncd.cli import run_grid
from uncd.parallel import threads


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--pairs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--thresholds", type=float, nargs=5, default=list(DEFAULT_THRESHOLDS))
    ap.add_argument("--epsilon-change", type=float, default=DEFAULT_EPSILON_CHANGE)
    ap.add_argument("--out", help="optional JSON report")
    args = ap.parse_args(argv)

    model = load_checkpoint(args.checkpoint)
    t0 = time.perf_counter()
    with threads():
        table, rows = run_grid(model, args.pairs, args.seed, ThresholdSchedule(tuple(args.thresholds)), args.epsilon_change)
    print(f"{'cell':<24} {'pairs':>5} {'PCC1':>14} {'PCC2':>14}")
    for c in table:
        print(
            f"{c['cell']:<24} {c['pairs']:>5} {100 * c['pcc1_mean']:6.2f} +- {100 * c['pcc1_std']:4.1f}"
            f" {100 * c['pcc2_mean']:6.2f} +- {100 * c['pcc2_std']:4.1f}"
        )
    print(f"{time.perf_counter() - t0:.1f} s")
    if args.out:
        Path(args.out).write_text(json.dumps({"cells": table, "pairs": rows}, indent=2))


if __name__ == "__main__":
    main()
