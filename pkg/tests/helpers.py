"""Shared builders for tests: tiny checkpoints and score tables that reproduce a known summary."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from scalemerge import rng
from scalemerge.grid import GridConfig, expand_grid, write_record
from scalemerge.metrics import ScoreRow, ScoreTable, SummaryRow
from scalemerge.taxonomy import HELD_IN, HELD_OUT
from scalemerge.tensor_store import DenseTensor, write_checkpoint

FIXTURES = Path(__file__).parent / "fixtures"
HELDIN_FIXTURE = FIXTURES / "heldin_palm2_it.csv"


def write_arrays(path, arrays: dict, model_id: str, dtype="float32", **kwargs):
    tensors = (DenseTensor.from_array(name, np.asarray(values, dtype=np.float32), dtype) for name, values in sorted(arrays.items()))
    return write_checkpoint(tensors, dtype, path, model_id=model_id, **kwargs)


def random_instance(seed: int, n_experts: int, n_tensors: int, max_elems: int, sparsity: float = 1.0):
    """Random base and experts as name -> array dicts; deltas are sparse when ``sparsity`` < 1."""
    gen = np.random.default_rng(seed)
    shapes = []
    for _ in range(n_tensors):
        numel = int(gen.integers(1, max_elems + 1))
        shapes.append((numel,) if gen.random() < 0.5 or numel < 4 else (numel // 4, 4))
    base, experts = {}, [dict() for _ in range(n_experts)]
    for i, shape in enumerate(shapes):
        name = f"block{i:02d}.w"
        b = gen.standard_normal(shape).astype(np.float32)
        base[name] = b
        for e in experts:
            delta = gen.standard_normal(shape).astype(np.float32) * 0.05
            if sparsity < 1:
                delta *= gen.random(shape) < sparsity
            e[name] = b + delta
    return base, experts


def heldin_fixture_rows() -> list[SummaryRow]:
    from scalemerge.metrics import load_summary_csv

    return load_summary_csv(HELDIN_FIXTURE)


def _expert_score(model_id: str, dataset: str) -> float:
    # deterministic, strictly positive reference scores in [0.3, 0.9)
    return 0.3 + 0.6 * float(rng.uniform(rng.derive_key("ref", model_id, dataset), 0, 1)[0])


def build_fixture_run(run_dir, summary: list[SummaryRow], base_model="palm2_it", seeds=(0, 1, 2)):
    """Grid records plus raw scores whose normalized aggregate equals ``summary``.

    Every held-in merged score is the target value times its expert's score,
    identically across seeds, so each level of the mean reproduces the value.
    Returns the score CSV path.
    """
    rows = [r for r in summary if r.base_model == base_model and r.split == "held_in"]
    methods = sorted({r.method for r in rows} & {"average", "task_arithmetic", "ties", "dare_ties"})
    sizes = sorted({r.size for r in rows}, key=["1B", "8B", "24B", "64B"].index)
    counts = sorted({r.n_experts for r in rows})
    config = GridConfig([base_model], sizes, methods, counts, list(seeds))
    target = {(r.method, r.size, r.n_experts): r.value for r in rows}
    run_dir = Path(run_dir)
    scores = ScoreTable()
    refs_written = set()
    for rec in expand_grid(config):
        rec.status = "completed"
        write_record(run_dir, rec)
        value = target[(rec.method, rec.size, rec.n_experts)]
        for cat, expert_id in zip(rec.selected_categories, rec.expert_ids):
            for ds in HELD_IN[cat]:
                ref = _expert_score(expert_id, ds)
                if (expert_id, ds) not in refs_written:
                    scores.add(ScoreRow(expert_id, ds, cat, "held_in", None, ref))
                    refs_written.add((expert_id, ds))
                scores.add(ScoreRow(rec.output_id, ds, cat, "held_in", rec.seed, value * ref))
        for cat, datasets in HELD_OUT.items():
            for ds in datasets:
                ref = _expert_score(rec.base_id, ds)
                if (rec.base_id, ds) not in refs_written:
                    scores.add(ScoreRow(rec.base_id, ds, cat, "held_out", None, ref))
                    refs_written.add((rec.base_id, ds))
                scores.add(ScoreRow(rec.output_id, ds, cat, "held_out", rec.seed, ref))
    (run_dir / "grid.json").write_text(json.dumps(config.to_dict()), encoding="utf-8")
    path = run_dir / "scores.csv"
    scores.to_csv(path)
    return path


def read_csv_rows(text: str) -> list[list[str]]:
    return list(csv.reader(line for line in text.splitlines() if line and not line.startswith("#")))


def random_score_tables(seed: int, scale: float = 1.0):
    """Records of a small grid plus raw score tables drawn at random.

    Returns ``(records, scores, parity_scores)``: ``scores`` has independent
    merged scores (all multiplied by ``scale``); ``parity_scores`` gives every
    merged model exactly its reference score.  Datasets per category vary in
    number so the level means differ from a flat mean.
    """
    gen = np.random.default_rng(seed)
    config = GridConfig(["bm"], ["1B"], ["ties", "average"], [2, 3], [0, 1])
    records = expand_grid(config)
    refs, merged = {}, []
    for rec in records:
        cells = [(cat, expert, "held_in") for cat, expert in zip(rec.selected_categories, rec.expert_ids)]
        cells.append(("nli", rec.base_id, "held_out"))
        for cat, ref_model, split in cells:
            for d in range(int(gen.integers(1, 4))):
                ds = f"{cat}-{d}"
                refs.setdefault((ref_model, ds), (cat, split, float(gen.uniform(0.01, 100.0))))
                merged.append((rec.output_id, ds, cat, split, rec.seed, ref_model, float(gen.uniform(0.01, 100.0))))
    ref_rows = [ScoreRow(m, ds, cat, split, None, v) for (m, ds), (cat, split, v) in refs.items()]
    scores = ScoreTable(
        [ScoreRow(r.model_id, r.dataset_id, r.category_id, r.split, None, r.score * scale) for r in ref_rows]
        + [ScoreRow(m, ds, c, s, seed_, v * scale) for m, ds, c, s, seed_, _, v in merged]
    )
    parity = ScoreTable(ref_rows + [ScoreRow(m, ds, c, s, seed_, refs[(r, ds)][2]) for m, ds, c, s, seed_, r, _ in merged])
    return records, scores, parity
