#!/usr/bin/env python3
"""Adaptation speed from random, empty-map and meta-trained initializations.

Writes one CSV row per (init, held-out map) with the number of ADAM steps
needed to reach the target PSNR, and prints the medians.
"""

import argparse
import csv
import logging
import sys

from fedmap.config import ExperimentConfig, apply_overrides, load_config
from fedmap.experiment import meta_speedup


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--held-out", type=int, default=20)
    ap.add_argument("--target", type=float, default=13.3)
    ap.add_argument("--max-iters", type=int, default=300)
    ap.add_argument("--csv", default="meta_ablation.csv")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO)

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set)
    res = meta_speedup(cfg, args.held_out, args.target, args.max_iters)
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("init", "map", "iterations"))
        for name, its in res.iterations.items():
            for i, n in enumerate(its):
                w.writerow((name, i, "" if n is None else n))
    for name in res.iterations:
        print(f"{name:7s} median {res.median(name, args.max_iters):6.1f}  "
              f"psnr after 2 steps {res.psnr_after_2[name]:6.2f}")
    print("timings", {k: round(v, 1) for k, v in res.timings.items()})
    return 0


if __name__ == "__main__":
    sys.exit(main())
