#!/usr/bin/env python3
"""FedAvg, FedAdam and FedYogi on the same heterogeneous map, over several seeds."""

import argparse
import csv
import sys
import time

from fedmap.config import ExperimentConfig, apply_overrides, load_config
from fedmap.experiment import compare_aggregators, prepare
from fedmap.federation import AGGREGATORS


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--csv", default="aggregators.csv")
    args = ap.parse_args(argv)

    base = load_config(args.config) if args.config else ExperimentConfig()
    base = apply_overrides(base, args.set)
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "aggregator", "threshold", "psnr", "ssim", "precision", "recall", "f1"))
        for seed in args.seeds:
            cfg = apply_overrides(base, [f"seed={seed}"])
            t = time.perf_counter()
            out = compare_aggregators(cfg, AGGREGATORS, args.jobs, prepare(cfg))
            for agg, a in out.items():
                s = a.summary()
                w.writerow((seed, agg, f"{a.threshold:.6f}", *(f"{s[k]:.6f}" for k in
                                                               ("psnr", "ssim", "precision", "recall", "f1"))))
                print(f"seed {seed} {agg:8s} f1 {s['f1']:.3f} psnr {s['psnr']:.2f} ssim {s['ssim']:.3f}")
            fh.flush()
            print(f"seed {seed} done in {time.perf_counter() - t:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
