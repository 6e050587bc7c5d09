#!/usr/bin/env python3
"""Scaled merge-benchmark replication: batches per controller, metrics table.

Usage:
    python scripts/table1.py [--trials 24] [--seed 0] [--controllers dmpd dmppi emppi]
                             [--out results/] [--jobs 2]
"""

from __future__ import annotations

import argparse
import collections
import time
from pathlib import Path

import numpy as np

from dmpd.scenario import ScenarioConfig
from dmpd.trial import METRIC_COLUMNS, randomize_scenario, run_trial, write_metrics_csv


def run_one(args):
    controller, trial_seed, out_dir = args
    scen = randomize_scenario(ScenarioConfig(), np.random.default_rng(trial_seed))
    trace_path = None
    if out_dir is not None:
        trace_path = Path(out_dir) / f"{controller}_seed{trial_seed}.jsonl"
    result, _ = run_trial(scen, controller, trial_seed, trace_path=trace_path)
    return controller, trial_seed, result


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=24)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--controllers", nargs="+", default=["dmpd", "dmppi", "emppi"])
    ap.add_argument("--out", type=str, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    tasks = [(c, args.seed + i, args.out) for c in args.controllers for i in range(args.trials)]
    t0 = time.time()
    if args.jobs > 1:
        import multiprocessing as mp
        with mp.Pool(args.jobs) as pool:
            outcomes = pool.map(run_one, tasks)
    else:
        outcomes = [run_one(t) for t in tasks]

    by_ctrl = collections.defaultdict(list)
    for controller, trial_seed, result in outcomes:
        by_ctrl[controller].append((trial_seed, result))

    rows = []
    for c in args.controllers:
        results = [r for _, r in by_ctrl[c]]
        reasons = collections.Counter(r.end_reason for r in results)
        row = {
            "controller": c,
            "Merge Success Rate": float(np.mean([r.merge_success for r in results])),
            "Ave. Merge Dist. (m)": float(np.mean([r.merge_distance for r in results])),
            "Ave. Min. Distance (m)": float(np.mean([r.min_distance for r in results])),
            "Ave. Acceleration (m/s^2)": float(np.mean([r.avg_abs_accel for r in results])),
        }
        rows.append(row)
        fails = [s for s, r in by_ctrl[c] if not r.merge_success]
        print(f"{c:6s} success={row['Merge Success Rate']:5.1%} "
              f"dist={row['Ave. Merge Dist. (m)']:5.2f} "
              f"mind={row['Ave. Min. Distance (m)']:5.3f} "
              f"acc={row['Ave. Acceleration (m/s^2)']:4.2f} "
              f"reasons={dict(reasons)} fail_seeds={fails}")

    if args.out:
        write_metrics_csv(rows, Path(args.out) / "metrics.csv")
    print(f"total {time.time()-t0:.0f}s")


if __name__ == "__main__":
    main()
