import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import HELDIN_FIXTURE, build_fixture_run, heldin_fixture_rows, read_csv_rows
from scalemerge.grid import GridConfig, expand_grid, load_records
from scalemerge.metrics import (
    MISSING_CELL,
    NormalizedRow,
    ScoreError,
    ScoreRow,
    ScoreTable,
    SummaryRow,
    aggregate,
    emit_report,
    format_value,
    load_summary_csv,
    normalize_held_in,
    normalize_held_out,
    normalize_records,
    write_summary_csv,
)


def row(value, category="A", dataset="d", seed=0, split="held_in", method="ties", size="1B", n=2, exclusion=None):
    return NormalizedRow(method, size, "bm", n, split, seed, category, dataset, value, exclusion=exclusion)


# ------------------------------------------------------------- normalization


def test_normalize_parity_and_ratio():
    assert normalize_held_in(0.7, 0.7) == 1.0
    assert normalize_held_in(0.45, 0.50) == 0.9
    assert normalize_held_out(0.3, 0.3) == 1.0
    assert normalize_held_out(1.10 * 0.5, 0.5) == pytest.approx(1.10, rel=1e-15)


@pytest.mark.parametrize("ref", [0.0, -0.2])
def test_non_positive_reference_is_flagged(ref):
    assert normalize_held_in(0.5, ref) is None
    assert normalize_held_out(0.5, ref) is None


# --------------------------------------------------------------- aggregation


def test_two_categories_hand_example():
    rows = [row(0.8, "A", "a1"), row(1.0, "A", "a2"), row(1.1, "B", "b1")]
    agg = aggregate(rows)
    assert sorted(c.value for c in agg.categories) == [0.9, 1.1]
    assert agg.summary[0].value == 1.0


def test_seed_level_hand_example():
    rows = [row(v, seed=s) for s, v in enumerate([1.0, 0.9, 0.8])]
    agg = aggregate(rows)
    assert agg.summary[0].value == 0.9
    assert agg.summary[0].n_seeds == 3


def test_single_value_is_unchanged():
    assert aggregate([row(0.8123)]).summary[0].value == 0.8123


def test_level_order_differs_from_flat_mean():
    # category A has three datasets, B has one: level means give 0.75, the flat mean 0.625
    rows = [row(0.5, "A", "a1"), row(0.5, "A", "a2"), row(0.5, "A", "a3"), row(1.0, "B", "b1")]
    leveled = aggregate(rows).summary[0].value
    flat = sum(r.value for r in rows) / len(rows)
    assert leveled == 0.75
    assert flat == 0.625


def test_level_order_seeds_last():
    # seed 0 covers two categories, seed 1 one: averaging categories before seeds matters
    rows = [row(0.6, "A", seed=0), row(1.0, "B", seed=0), row(0.2, "A", seed=1)]
    assert aggregate(rows).summary[0].value == pytest.approx(0.5, abs=0)  # mean(0.8, 0.2)


def test_excluded_rows_are_tallied_and_empty_categories_dropped():
    rows = [
        row(0.9, "A", "a1"),
        row(None, "A", "a2", exclusion="non-positive reference"),
        row(None, "B", "b1", exclusion="non-positive reference"),
    ]
    agg = aggregate(rows)
    assert agg.summary[0].value == 0.9
    assert agg.exclusions == Counter({"non-positive reference": 2})
    assert agg.dropped_categories == 1


def test_cells_are_kept_apart():
    rows = [row(0.5, method="ties"), row(0.7, method="average"), row(0.9, split="held_out")]
    got = {(r.method, r.split): r.value for r in aggregate(rows).summary}
    assert got == {("ties", "held_in"): 0.5, ("average", "held_in"): 0.7, ("ties", "held_out"): 0.9}


# ------------------------------------------------------- properties on tables


def _random_run(data):
    """A small grid with random raw scores; returns records and (merged, reference) score rows."""
    config = GridConfig(["bm"], ["1B"], ["ties", "average"], [2, 3], [0, 1])
    records = expand_grid(config)
    score = st.floats(0.01, 100.0, allow_nan=False)
    merged, refs = [], {}
    for rec in records:
        for cat, expert in zip(rec.selected_categories, rec.expert_ids):
            n_ds = data.draw(st.integers(1, 3))
            for d in range(n_ds):
                ds = f"{cat}-{d}"
                refs.setdefault((expert, ds, cat, "held_in"), data.draw(score))
                merged.append((rec.output_id, ds, cat, "held_in", rec.seed, data.draw(score)))
        for d in range(data.draw(st.integers(1, 3))):
            ds = f"out-{d}"
            refs.setdefault((rec.base_id, ds, "nli", "held_out"), data.draw(score))
            merged.append((rec.output_id, ds, "nli", "held_out", rec.seed, data.draw(score)))
    return records, merged, refs


def _table(merged, refs, scale=1.0):
    rows = [ScoreRow(m, d, c, s, None, v * scale) for (m, d, c, s), v in refs.items()]
    for mid, ds, cat, split, seed, value in merged:
        rows.append(ScoreRow(mid, ds, cat, split, seed, value * scale))
    return ScoreTable(rows)


@settings(max_examples=100, deadline=None)
@given(st.data(), st.floats(0.001, 1000.0))
def test_scale_equivariance(data, scale):
    records, merged, refs = _random_run(data)
    base = normalize_records(records, _table(merged, refs))
    scaled = normalize_records(records, _table(merged, refs, scale))
    assert len(base) == len(scaled)
    for a, b in zip(base, scaled):
        assert a.value == pytest.approx(b.value, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_parity_fixed_point(data):
    records, merged, refs = _random_run(data)
    by_ref = {}
    expert_for = {}
    for rec in records:
        expert_for[rec.output_id] = (dict(zip(rec.selected_categories, rec.expert_ids)), rec.base_id)
    for (m, d, c, s), v in refs.items():
        by_ref[(m, d)] = v
    equal = []
    for mid, ds, cat, split, seed, _ in merged:
        experts, base_id = expert_for[mid]
        ref_model = experts[cat] if split == "held_in" else base_id
        equal.append((mid, ds, cat, split, seed, by_ref[(ref_model, ds)]))
    agg = aggregate(normalize_records(records, _table(equal, refs)))
    assert agg.summary
    assert all(r.value == 1.0 for r in agg.summary)
    assert all(c.value == 1.0 for c in agg.categories)


def test_normalization_uses_the_selected_experts_only():
    rec = expand_grid(GridConfig(["bm"], ["1B"], ["ties"], [2], [0]))[0]
    other = next(c for c in ("sentiment_analysis", "summarization", "mrpc_like") if c not in rec.selected_categories)
    rows = [ScoreRow(e, f"ds-{c}", c, "held_in", None, 0.5) for c, e in zip(rec.selected_categories, rec.expert_ids)]
    rows += [ScoreRow(rec.output_id, f"ds-{c}", c, "held_in", 0, 0.25) for c in rec.selected_categories]
    rows += [ScoreRow(rec.output_id, "ds2", other, "held_in", 0, 0.9)]
    out = normalize_records([rec], ScoreTable(rows))
    assert [r.value for r in out] == [0.5, 0.5]
    assert [r.reference_model for r in out] == list(rec.expert_ids)


def test_reference_provenance_prefers_same_seed():
    rec = expand_grid(GridConfig(["bm"], ["1B"], ["ties"], [1], [3]))[0]
    cat, expert = rec.selected_categories[0], rec.expert_ids[0]
    table = ScoreTable(
        [
            ScoreRow(expert, "ds", cat, "held_in", None, 0.5),
            ScoreRow(expert, "ds", cat, "held_in", 3, 0.8),
            ScoreRow(rec.output_id, "ds", cat, "held_in", 3, 0.4),
        ]
    )
    (out,) = normalize_records([rec], table)
    assert out.value == 0.5
    assert out.reference_seed == 3


def test_missing_reference_is_an_exclusion():
    rec = expand_grid(GridConfig(["bm"], ["1B"], ["ties"], [1], [0]))[0]
    table = ScoreTable([ScoreRow(rec.output_id, "ds", rec.selected_categories[0], "held_in", 0, 0.4)])
    (out,) = normalize_records([rec], table)
    assert out.value is None
    assert out.exclusion == "missing reference"


# --------------------------------------------------------------- score table


def test_score_table_rejects_duplicates_and_non_finite():
    with pytest.raises(ScoreError, match="duplicate"):
        ScoreTable([ScoreRow("m", "d", "c", "held_in", 0, 0.1), ScoreRow("m", "d", "c", "held_in", 0, 0.2)])
    with pytest.raises(ScoreError, match="non-finite"):
        ScoreTable([ScoreRow("m", "d", "c", "held_in", 0, math.inf)])
    with pytest.raises(ScoreError, match="split"):
        ScoreTable([ScoreRow("m", "d", "c", "dev", 0, 0.1)])


def test_score_csv_round_trip(tmp_path):
    table = ScoreTable([ScoreRow("m", "d", "c", "held_in", None, 0.1), ScoreRow("m", "d", "c", "held_in", 2, 1 / 3)])
    table.to_csv(tmp_path / "s.csv")
    assert ScoreTable.from_csv(tmp_path / "s.csv").rows == table.rows


def test_score_csv_header_is_checked(tmp_path):
    (tmp_path / "s.csv").write_text("model,dataset\nm,d\n")
    with pytest.raises(ScoreError, match="header"):
        ScoreTable.from_csv(tmp_path / "s.csv")


# -------------------------------------------------------------------- report


@pytest.mark.parametrize(
    "value, text",
    [(0.845, "0.84"), (0.855, "0.86"), (0.125, "0.12"), (1.0, "1.00"), (0.8500000000000001, "0.85"), (None, MISSING_CELL)],
)
def test_format_value_rounds_half_even(value, text):
    assert format_value(value) == text


def test_report_layout_from_fixture():
    text = emit_report(heldin_fixture_rows(), "csv")
    header, *body = read_csv_rows(text)
    assert header[:3] == ["base_model", "split", "method"]
    assert header[3:] == [f"{s}/{n}" for s in ("1B", "8B", "24B", "64B") for n in (2, 4, 6, 8)]
    assert [r[2] for r in body] == ["Average", "Task Arithmetic", "Dare-TIES", "TIES", "Multitask"]
    assert body[0][3] == "0.85"
    assert body[1][3 + 12] == "1.00"


def test_markdown_report_from_fixture():
    text = emit_report(heldin_fixture_rows(), "markdown")
    lines = [line for line in text.splitlines() if line.startswith("| Average")]
    assert lines and lines[0].split("|")[2].strip() == "0.85"


def test_missing_cell_is_a_dash():
    rows = [r for r in heldin_fixture_rows() if not (r.method == "ties" and r.size == "8B" and r.n_experts == 4)]
    header, *body = read_csv_rows(emit_report(rows, "csv"))
    ties = next(r for r in body if r[2] == "TIES")
    assert ties[header.index("8B/4")] == MISSING_CELL
    assert "0" not in ties[header.index("8B/4")]


def test_empty_summary_is_header_only_with_warning(caplog):
    text = emit_report([], "markdown")
    table_lines = [line for line in text.splitlines() if line.startswith("|")]
    assert len(table_lines) == 2
    assert "warning: empty summary" in text
    assert "empty summary" in caplog.text
    csv_text = emit_report([], "csv")
    assert len(read_csv_rows(csv_text)) == 1


def test_footer_lists_exclusions():
    text = emit_report(heldin_fixture_rows(), "csv", exclusions=Counter({"non-positive reference": 3}), dropped_categories=1)
    assert "# excluded rows: 3 (non-positive reference: 3)" in text
    assert "# dropped categories: 1" in text


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report([], "html")


def test_summary_csv_round_trip(tmp_path):
    rows = heldin_fixture_rows()
    write_summary_csv(rows, tmp_path / "s.csv")
    assert load_summary_csv(tmp_path / "s.csv") == rows
    assert load_summary_csv(HELDIN_FIXTURE)[0] == SummaryRow("average", "1B", "palm2_it", 2, "held_in", 0.85)


def test_full_pipeline_reproduces_fixture(tmp_path):
    scores = build_fixture_run(tmp_path, heldin_fixture_rows())
    agg = aggregate(normalize_records(load_records(tmp_path), ScoreTable.from_csv(scores)))
    held_in = [r for r in agg.summary if r.split == "held_in"]
    assert len(held_in) == 64
    want = {(r.method, r.size, r.n_experts): format_value(r.value) for r in heldin_fixture_rows()}
    for r in held_in:
        assert format_value(r.value) == want[(r.method, r.size, r.n_experts)]
    assert all(r.value == pytest.approx(1.0) for r in agg.summary if r.split == "held_out")
