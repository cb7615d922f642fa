#!/usr/bin/env python3
"""Refined-map F1 of the FedAvg global model over a range of binarization thresholds.

Used to choose ``eval.threshold`` on seeds that the acceptance suite does not use.
"""

import argparse
import sys

import numpy as np

from fedmap.config import ExperimentConfig, apply_overrides
from fedmap.experiment import assess, learned_threshold, prepare, run_federated


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[3, 4])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--thresholds", type=float, nargs="+",
                    default=[round(x, 3) for x in np.arange(0.40, 0.505, 0.01)])
    args = ap.parse_args(argv)
    for seed in args.seeds:
        cfg = apply_overrides(ExperimentConfig(), [*args.set, f"seed={seed}"])
        setup = prepare(cfg)
        learned = setup.render(run_federated(cfg, setup=setup).global_params)
        otsu = learned_threshold(learned.gray(), "otsu")
        print(f"seed {seed}: otsu threshold {otsu:.3f}")
        for th in ["otsu", *args.thresholds]:
            c = apply_overrides(cfg, [f"eval.threshold={th}"])
            a = assess(c, learned, setup.gt, setup.routes)
            print(f"  {th!s:>6}  f1 {a.plan.f1:.3f}  psnr {a.psnr:.2f}  ssim {a.ssim:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
