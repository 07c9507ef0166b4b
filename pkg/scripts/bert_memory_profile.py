"""Meter one BERT-base-sized encoder layer in every execution mode.

Prints peak transient, persistent and total bytes per mode.  Takes around
20 seconds on one CPU core (most of it in the SVD and the dense run).
"""
import argparse

import numpy as np

from flashsvd.encoder import run_layer, synth_model
from flashsvd.memtier import MemoryMeter, TilePlan
from flashsvd.planner import MODES


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--seqlen", type=int, default=128)
    ap.add_argument("--rank", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    layer = synth_model(args.seed, 1, 768, 3072, 12, args.rank)[0]
    x = np.random.default_rng(args.seed).normal(size=(args.batch, args.seqlen, 768)).astype(np.float32)
    ref = None
    print(f"{'mode':<10} {'transient':>12} {'persistent':>12} {'peak total':>12} {'max|err|':>10}")
    for mode in MODES:
        meter = MemoryMeter()
        out = run_layer(x, layer, mode, TilePlan(), meter)
        ref = out if ref is None else ref
        err = float(np.max(np.abs(out - ref)))
        print(f"{mode:<10} {meter.peak_transient_bytes:>12,} {meter.persistent_bytes:>12,} "
              f"{meter.peak_total_bytes:>12,} {err:>10.2e}")


if __name__ == "__main__":
    main()
