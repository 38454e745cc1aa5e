"""Empirical mean of DARE-pruned task vectors over many seeds.

For each drop probability, prints the per-element relative deviation of the
seed-averaged vector from the input (median, p99, max), the pooled deviation,
one per-element standard error, and the number of seeds a 2% per-element
bound would need at roughly 3.5 standard errors.

    python scripts/dare_expectation.py --seeds 1000 --elements 1000
"""

from __future__ import annotations

import argparse
import math

import numpy as np

from scalemerge.merge_core import dare_inplace


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=1000)
    parser.add_argument("--elements", type=int, default=1000)
    parser.add_argument("--drop-p", nargs="+", type=float, default=[0.0, 0.5, 0.9])
    parser.add_argument("--tolerance", type=float, default=0.02)
    args = parser.parse_args()

    gen = np.random.default_rng(4)
    values = (gen.uniform(0.1, 1.0, args.elements) * gen.choice([-1.0, 1.0], args.elements)).astype(np.float32)
    print("drop_p  median    p99       max       pooled    std_err   seeds_for_tolerance")
    for p in args.drop_p:
        total = np.zeros(values.size)
        for seed in range(args.seeds):
            flat = values.copy()
            dare_inplace(flat, p, seed, "w")
            total += flat
        ratio = total / args.seeds / values
        dev = np.abs(ratio - 1)
        se = math.sqrt(p / (1 - p) / args.seeds)
        needed = math.ceil((3.5 / args.tolerance) ** 2 * p / (1 - p))
        q50, q99, worst = np.quantile(dev, [0.5, 0.99, 1.0])
        print(f"{p:<7.2f} {q50:<9.4f} {q99:<9.4f} {worst:<9.4f} {abs(ratio.mean() - 1):<9.5f} {se:<9.4f} {needed}")


if __name__ == "__main__":
    main()
