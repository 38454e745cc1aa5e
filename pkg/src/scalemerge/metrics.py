"""Normalized performance and report tables.

Held-in scores are divided by the matching task expert's score and held-out
scores by the base model's.  Aggregation is an unweighted mean over datasets
within a category, then over categories, then over seeds, in that order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
import statistics
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from .taxonomy import STANDARD_METHODS, STANDARD_SIZES

log = logging.getLogger(__name__)

SPLITS = ("held_in", "held_out")
SCORE_HEADER = ("model_id", "dataset_id", "category_id", "split", "seed", "score")
SUMMARY_HEADER = ("method", "size", "base_model", "n_experts", "split", "value")
MISSING_CELL = "—"
METHOD_LABELS = {
    "average": "Average",
    "task_arithmetic": "Task Arithmetic",
    "dare_ties": "Dare-TIES",
    "ties": "TIES",
    "multitask": "Multitask",
}


class ScoreError(ValueError):
    pass


# ------------------------------------------------------------------ scores


@dataclass(frozen=True)
class ScoreRow:
    model_id: str
    dataset_id: str
    category_id: str
    split: str
    seed: int | None
    score: float


class ScoreTable:
    """Raw per-(model, dataset, seed) scores with uniqueness and finiteness enforced."""

    def __init__(self, rows: Iterable[ScoreRow] = ()):
        self.rows: list[ScoreRow] = []
        self._index: dict[tuple[str, str, int | None], ScoreRow] = {}
        self._by_model_dataset: dict[tuple[str, str], list[ScoreRow]] = defaultdict(list)
        self._by_model: dict[str, list[ScoreRow]] = defaultdict(list)
        for row in rows:
            self.add(row)

    def add(self, row: ScoreRow) -> None:
        if row.split not in SPLITS:
            raise ScoreError(f"unknown split {row.split!r} for {row.model_id}/{row.dataset_id}")
        if not math.isfinite(row.score):
            raise ScoreError(f"non-finite score for {row.model_id}/{row.dataset_id}")
        key = (row.model_id, row.dataset_id, row.seed)
        if key in self._index:
            raise ScoreError(f"duplicate score row for {key}")
        self._index[key] = row
        self._by_model_dataset[(row.model_id, row.dataset_id)].append(row)
        self._by_model[row.model_id].append(row)
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def for_model(self, model_id: str) -> list[ScoreRow]:
        return list(self._by_model.get(model_id, ()))

    def reference(self, model_id: str, dataset_id: str, seed: int | None) -> ScoreRow | None:
        """Reference score: same seed if recorded, else the model's only row for the dataset."""
        exact = self._index.get((model_id, dataset_id, seed))
        if exact is not None:
            return exact
        candidates = self._by_model_dataset.get((model_id, dataset_id), [])
        if len(candidates) == 1:
            return candidates[0]
        return self._index.get((model_id, dataset_id, None))

    @classmethod
    def from_csv(cls, path) -> ScoreTable:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != SCORE_HEADER:
                raise ScoreError(f"score file header must be {','.join(SCORE_HEADER)}, got {reader.fieldnames}")
            rows = []
            for line, rec in enumerate(reader, start=2):
                try:
                    seed = int(rec["seed"]) if rec["seed"].strip() else None
                    score = float(rec["score"])
                except ValueError as exc:
                    raise ScoreError(f"{path}:{line}: {exc}") from None
                rows.append(ScoreRow(rec["model_id"], rec["dataset_id"], rec["category_id"], rec["split"], seed, score))
        return cls(rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(SCORE_HEADER)
            for r in self.rows:
                w.writerow([r.model_id, r.dataset_id, r.category_id, r.split, "" if r.seed is None else r.seed, repr(r.score)])


# ------------------------------------------------------------- normalization


def normalize_held_in(merged_score: float, expert_score: float) -> float | None:
    """Merged score relative to the task expert's; ``None`` flags a non-positive reference."""
    if not expert_score > 0:
        return None
    return merged_score / expert_score


def normalize_held_out(merged_score: float, base_score: float) -> float | None:
    """Merged score relative to the base model's; ``None`` flags a non-positive reference."""
    if not base_score > 0:
        return None
    return merged_score / base_score


@dataclass(frozen=True)
class NormalizedRow:
    method: str
    size: str
    base_model: str
    n_experts: int
    split: str
    seed: int
    category: str
    dataset: str
    value: float | None  # None: excluded
    reference_model: str | None = None
    reference_seed: int | None = None
    exclusion: str | None = None

    @property
    def cell(self) -> tuple:
        return (self.base_model, self.split, self.method, self.size, self.n_experts)


def normalize_records(records, scores: ScoreTable) -> list[NormalizedRow]:
    """Normalize every merged score belonging to ``records`` against its reference model.

    Held-in rows are restricted to the record's selected categories, each
    compared to that category's expert; held-out rows are compared to the base.
    """
    out = []
    for rec in records:
        expert_for = dict(zip(rec.selected_categories, rec.expert_ids))
        for row in scores.for_model(rec.output_id):
            if row.seed is not None and row.seed != rec.seed:
                continue
            if row.split == "held_in":
                if row.category_id not in expert_for:
                    continue
                ref_model = expert_for[row.category_id]
                norm = normalize_held_in
            else:
                ref_model = rec.base_id
                norm = normalize_held_out
            common = dict(
                method=rec.method, size=rec.size, base_model=rec.base_model, n_experts=rec.n_experts,
                split=row.split, seed=rec.seed, category=row.category_id, dataset=row.dataset_id,
                reference_model=ref_model,
            )  # fmt: skip
            ref = scores.reference(ref_model, row.dataset_id, rec.seed)
            if ref is None:
                out.append(NormalizedRow(**common, value=None, exclusion="missing reference"))
                continue
            value = norm(row.score, ref.score)
            if value is None:
                out.append(NormalizedRow(**common, value=None, reference_seed=ref.seed, exclusion="non-positive reference"))
            else:
                out.append(NormalizedRow(**common, value=value, reference_seed=ref.seed))
    return out


# ---------------------------------------------------------------- aggregation


@dataclass(frozen=True)
class SummaryRow:
    method: str
    size: str
    base_model: str
    n_experts: int
    split: str
    value: float
    n_seeds: int = 1


@dataclass(frozen=True)
class CategoryRow:
    method: str
    size: str
    base_model: str
    n_experts: int
    split: str
    seed: int
    category: str
    value: float
    n_datasets: int


@dataclass
class Aggregate:
    summary: list[SummaryRow] = field(default_factory=list)
    categories: list[CategoryRow] = field(default_factory=list)
    exclusions: Counter = field(default_factory=Counter)
    dropped_categories: int = 0

    @property
    def excluded_rows(self) -> int:
        return sum(self.exclusions.values())


def _mean(values: Sequence[float]) -> float:
    # exact rational mean rounded once, so hand-computed decimal examples compare with ==
    return float(statistics.mean(values))


def aggregate(rows: Iterable[NormalizedRow]) -> Aggregate:
    """Dataset mean within category, then category mean, then seed mean."""
    result = Aggregate()
    by_category: dict[tuple, list[float]] = defaultdict(list)
    for row in rows:
        key = (row.cell, row.seed, row.category)
        if row.value is None:
            result.exclusions[row.exclusion or "excluded"] += 1
            by_category.setdefault(key, [])
        else:
            by_category[key].append(row.value)

    by_seed: dict[tuple, list[float]] = defaultdict(list)
    for (cell, seed, category), values in sorted(by_category.items(), key=lambda kv: repr(kv[0])):
        if not values:
            result.dropped_categories += 1
            log.warning("category %s dropped for %s seed %s: every dataset excluded", category, cell, seed)
            continue
        base_model, split, method, size, n = cell
        value = _mean(values)
        result.categories.append(CategoryRow(method, size, base_model, n, split, seed, category, value, len(values)))
        by_seed[(cell, seed)].append(value)

    by_cell: dict[tuple, list[float]] = defaultdict(list)
    for (cell, seed), values in by_seed.items():
        by_cell[cell].append(_mean(values))
    for cell, values in by_cell.items():
        base_model, split, method, size, n = cell
        result.summary.append(SummaryRow(method, size, base_model, n, split, _mean(values), len(values)))
    result.summary.sort(key=lambda r: (r.base_model, r.split, _method_order(r.method), _size_order(r.size), r.n_experts))
    return result


# ------------------------------------------------------------------- report


def _method_order(method: str):
    return (STANDARD_METHODS.index(method), "") if method in STANDARD_METHODS else (len(STANDARD_METHODS), method)


def _size_order(size: str):
    if size in STANDARD_SIZES:
        return (0, STANDARD_SIZES.index(size), "")
    m = re.match(r"^([0-9.]+)", size)
    return (1, float(m.group(1)) if m else math.inf, size)


def format_value(value: float | None) -> str:
    """Two decimals, round-half-even on the shortest decimal repr of the float."""
    if value is None or not math.isfinite(value):
        return MISSING_CELL
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def method_label(method: str) -> str:
    return METHOD_LABELS.get(method, method)


def _table_axes(rows, methods, sizes, expert_counts):
    methods = list(methods) if methods is not None else sorted({r.method for r in rows}, key=_method_order)
    sizes = list(sizes) if sizes is not None else sorted({r.size for r in rows}, key=_size_order)
    counts = list(expert_counts) if expert_counts is not None else sorted({r.n_experts for r in rows})
    return methods, sizes, counts


def emit_report(
    summary: Sequence[SummaryRow],
    fmt: str = "markdown",
    path=None,
    *,
    methods: Sequence[str] | None = None,
    sizes: Sequence[str] | None = None,
    expert_counts: Sequence[int] | None = None,
    exclusions: Counter | None = None,
    dropped_categories: int = 0,
) -> str:
    """Render methods as rows and (size x n_experts) as columns, one table per (base model, split).

    Missing cells render as an em dash, never as zero.
    """
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"unknown report format {fmt!r}")
    summary = list(summary)
    groups: dict[tuple[str, str], list[SummaryRow]] = defaultdict(list)
    for row in summary:
        groups[(row.base_model, row.split)].append(row)
    if not summary:
        log.warning("empty summary: emitting header-only table")
    methods, sizes, counts = _table_axes(summary, methods, sizes, expert_counts)
    columns = [(s, n) for s in sizes for n in counts]
    footer = _footer(exclusions, dropped_categories, empty=not summary)

    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["base_model", "split", "method"] + [f"{s}/{n}" for s, n in columns])
        for (base_model, split), rows in sorted(groups.items()):
            cells = {(r.method, r.size, r.n_experts): r.value for r in rows}
            for m in methods:
                w.writerow([base_model, split, method_label(m)] + [format_value(cells.get((m, s, n))) for s, n in columns])
        text = buf.getvalue() + "".join(f"# {line}\n" for line in footer)
    else:
        parts = []
        header = "| Merging Method | " + " | ".join(f"{s} · {n}" for s, n in columns) + " |" if columns else "| Merging Method |"
        rule = "|---|" + "---:|" * len(columns)
        if not groups:
            parts.append(header + "\n" + rule + "\n")
        for (base_model, split), rows in sorted(groups.items()):
            cells = {(r.method, r.size, r.n_experts): r.value for r in rows}
            lines = [f"### {base_model} · {split}", "", header, rule]
            for m in methods:
                lines.append(f"| {method_label(m)} | " + " | ".join(format_value(cells.get((m, s, n))) for s, n in columns) + " |")
            parts.append("\n".join(lines) + "\n")
        text = "\n".join(parts)
        if footer:
            text += "\n" + "\n".join(f"_{line}_" for line in footer) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _footer(exclusions: Counter | None, dropped: int, empty: bool) -> list[str]:
    lines = []
    if empty:
        lines.append("warning: empty summary")
    if exclusions and sum(exclusions.values()):
        detail = ", ".join(f"{k}: {v}" for k, v in sorted(exclusions.items()))
        lines.append(f"excluded rows: {sum(exclusions.values())} ({detail})")
    if dropped:
        lines.append(f"dropped categories: {dropped}")
    return lines


def load_summary_csv(path) -> list[SummaryRow]:
    """Read pre-aggregated long-form rows (``method,size,base_model,n_experts,split,value``)."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != SUMMARY_HEADER:
            raise ScoreError(f"summary header must be {','.join(SUMMARY_HEADER)}, got {reader.fieldnames}")
        return [
            SummaryRow(r["method"], r["size"], r["base_model"], int(r["n_experts"]), r["split"], float(r["value"]))
            for r in reader
        ]


def write_summary_csv(rows: Iterable[SummaryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r.method, r.size, r.base_model, r.n_experts, r.split, repr(r.value)])
