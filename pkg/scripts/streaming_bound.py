"""Peak traced memory of a streaming merge relative to the largest tensor.

Generates a synthetic family (base plus N experts of T float32 tensors), then
merges it with each method under ``tracemalloc`` and prints the peak as a
multiple of the largest tensor's size.  The defaults give 512 MB experts.

    python scripts/streaming_bound.py /tmp/stream --elements 16777216
"""

from __future__ import annotations

import argparse
import shutil
import time
import tracemalloc
from pathlib import Path

from scalemerge.merge_core import MergeRecipe, run_recipe
from scalemerge.synthetic import FamilySpec, gen_family


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("workdir", type=Path)
    parser.add_argument("--experts", type=int, default=8)
    parser.add_argument("--tensors", type=int, default=8)
    parser.add_argument("--elements", type=int, default=1 << 24, help="elements per tensor")
    parser.add_argument("--methods", nargs="+", default=["ties", "dare_ties", "task_arithmetic", "average"])
    parser.add_argument("--keep", action="store_true", help="keep the generated checkpoints")
    args = parser.parse_args()

    spec = FamilySpec(
        rng_seed=8, tensor_shapes=[(args.elements,)] * args.tensors, n_experts=args.experts, delta_sparsity=1.0, conflict_rate=0.3
    )
    start = time.perf_counter()
    family = gen_family(spec, args.workdir / "family")
    largest = family.base.largest_tensor_bytes()
    print(f"generated {args.experts} experts x {family.base.total_params * 4 / 2**20:.0f} MB in {time.perf_counter() - start:.0f}s")
    print(f"bound (experts + 2) x largest = {args.experts + 2} x {largest / 2**20:.0f} MB")
    for method in args.methods:
        recipe = MergeRecipe(
            method, tuple(str(e.root) for e in family.experts), base=None if method == "average" else str(family.base.root)
        )
        out = args.workdir / f"merged-{method}"
        tracemalloc.start()
        start = time.perf_counter()
        run_recipe(recipe, out)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        print(f"{method:<16} peak {peak / largest:5.2f} x largest  {time.perf_counter() - start:6.1f}s")
        shutil.rmtree(out)
    if not args.keep:
        shutil.rmtree(args.workdir / "family")


if __name__ == "__main__":
    main()
