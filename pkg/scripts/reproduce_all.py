#!/usr/bin/env python3
"""Train the desk baseline, run every sweep and mitigation config, then build the report tables.

Run from the repository root:  python scripts/reproduce_all.py [--skip-train] [--trials N]
"""
import argparse
import os
import sys
import time

from snnfault import cli

EXPERIMENTS = [
    ("sweep", "configs/sweep_bit.json"),
    ("sweep", "configs/sweep_count.json"),
    ("sweep", "configs/sweep_size.json"),
    ("mitigate", "configs/mitigate.json"),
    ("mitigate", "configs/threshold_sweep.json"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--skip-train", action="store_true", help="reuse runs/baseline/model.ckpt")
    ap.add_argument("--trials", type=int, help="override trials per point (quick look)")
    ap.add_argument("--only", nargs="*", help="substring filter on config names")
    args = ap.parse_args()
    extra = ["--trials", str(args.trials)] if args.trials else []
    status = 0
    if not args.skip_train:
        status |= cli.main(["train", "--config", "configs/baseline.json"])
    for command, config in EXPERIMENTS:
        if args.only and not any(s in config for s in args.only):
            continue
        t = time.perf_counter()
        print(f"== {config}", flush=True)
        status |= cli.main([command, "--config", config] + extra)
        print(f"   {time.perf_counter() - t:.0f}s", flush=True)
    dirs = ["runs/baseline"] + [f"runs/{c.split('/')[-1][:-5]}" for _, c in EXPERIMENTS]
    dirs = [d for d in dirs if os.path.isdir(d)]
    status |= cli.main(["report", *dirs, "--out", "runs/report"])
    return status


if __name__ == "__main__":
    sys.exit(main())
