"""Desk-scale merge grid: synthetic checkpoints, every method, a proxy score and the report.

No language model is evaluated here.  Each merged model gets a proxy held-in
score per category: the cosine similarity between its task vector and that
category's expert task vector, floored at 0.01.  An expert scores 1.0
against itself, so the normalized value reads as "how much of the expert's
direction survives the merge".  Larger "sizes" simply mean larger tensors.

    python scripts/grid_demo.py /tmp/demo --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from scalemerge.grid import GridConfig, expand_grid, output_dir, run_grid, synthesize_checkpoints
from scalemerge.metrics import ScoreRow, ScoreTable, aggregate, emit_report, normalize_records
from scalemerge.tensor_store import open_checkpoint, read_tensor

SHAPES = {"1B": [(64, 64)], "8B": [(128, 128)], "24B": [(192, 192)], "64B": [(256, 256)]}


def flat_model(root) -> np.ndarray:
    manifest = open_checkpoint(root)
    return np.concatenate([read_tensor(manifest, n).values.reshape(-1) for n in sorted(manifest.names)]).astype(np.float64)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom else 0.0


def proxy_scores(config: GridConfig, run_dir: Path) -> ScoreTable:
    scores = ScoreTable()
    cache: dict[str, np.ndarray] = {}

    def load(model_id):
        if model_id not in cache:
            cache[model_id] = flat_model(Path(config.checkpoint_root) / model_id)
        return cache[model_id]

    seen = set()
    for rec in expand_grid(config):
        base = load(rec.base_id)
        merged = flat_model(output_dir(run_dir, rec.record_key)) - base
        for cat, expert_id in zip(rec.selected_categories, rec.expert_ids):
            dataset = f"proxy-{cat}"
            if expert_id not in seen:
                scores.add(ScoreRow(expert_id, dataset, cat, "held_in", None, 1.0))
                seen.add(expert_id)
            value = max(cosine(merged, load(expert_id) - base), 0.01)
            scores.add(ScoreRow(rec.output_id, dataset, cat, "held_in", rec.seed, value))
    return scores


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("workdir", type=Path)
    parser.add_argument("--sizes", nargs="+", default=list(SHAPES))
    parser.add_argument("--counts", nargs="+", type=int, default=[2, 4, 6, 8])
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    parser.add_argument("--conflict-rate", type=float, default=0.3)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    methods = ["average", "task_arithmetic", "dare_ties", "ties"]
    run_dir = args.workdir / "run"
    for size in args.sizes:
        # one grid per size so each gets its own tensor shapes
        config = GridConfig(
            ["synthetic"], [size], methods, args.counts, args.seeds,
            checkpoint_root=str(args.workdir / "checkpoints"), drop_p=0.5,
        )  # fmt: skip
        if not (Path(config.checkpoint_root) / "synthetic" / size / "base").exists():
            synthesize_checkpoints(config, SHAPES[size], delta_sparsity=0.5, conflict_rate=args.conflict_rate)
        result = run_grid(expand_grid(config), run_dir, resume=True, workers=args.workers)
        print(f"{size}: executed {result.executed}, skipped {result.skipped}, failed {len(result.failed)}")

    config = GridConfig(["synthetic"], args.sizes, methods, args.counts, args.seeds, checkpoint_root=str(args.workdir / "checkpoints"), drop_p=0.5)
    scores = proxy_scores(config, run_dir)
    scores.to_csv(args.workdir / "proxy_scores.csv")
    agg = aggregate(normalize_records(expand_grid(config), scores))
    print(emit_report(agg.summary, "markdown", sizes=args.sizes, expert_counts=args.counts, methods=methods))


if __name__ == "__main__":
    main()
