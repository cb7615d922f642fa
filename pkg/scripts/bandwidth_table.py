#!/usr/bin/env python3
"""Print raw-map versus model transfer sizes as a markdown table."""

import sys

import numpy as np

from fedmap.federation import bandwidth_report
from fedmap.network import NetworkConfig, init_params
from fedmap.params_io import container_layout, serialize_params


def main():
    lay = container_layout(serialize_params(init_params(NetworkConfig(), np.random.default_rng(0)), "fp16"))
    print(f"model: {lay['trainable_values']} trainable values, {lay['trainable_bytes']} B fp16 "
          f"({lay['total_bytes']} B with header and BatchNorm buffers)\n")
    print("| format | size | raw bytes | model bytes | reduction | reference |")
    print("|---|---|---|---|---|---|")
    for r in bandwidth_report(lay["trainable_bytes"]):
        print(f"| {r.format} | {r.width}x{r.height} | {r.raw_bytes} | {r.model_bytes} | "
              f"{r.reduction_pct:.2f}% | {r.reference_pct:.2f}% |")
    return 0


if __name__ == "__main__":
    sys.exit(main())
