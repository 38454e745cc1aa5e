"""``scalemerge`` command line.

Exit codes: 0 on success, 1 for user errors (bad recipe, missing or
mismatched checkpoints, failed grid cells), 2 for internal errors.
Progress goes to stderr, results to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .grid import GridConfig, expand_grid, load_records, run_grid
from .merge_core import MergeRecipe, RecipeError, run_recipe
from .metrics import (
    ScoreTable,
    aggregate,
    emit_report,
    load_summary_csv,
    normalize_records,
    write_summary_csv,
)
from .synthetic import FamilySpec, checkpoint_conflict_stats, gen_family
from .tensor_store import CheckpointError, check_aligned, open_checkpoint, read_tensor

log = logging.getLogger("scalemerge")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
GRID_CONFIG_COPY = "grid.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -------------------------------------------------------------------- merge


_FLAG_FIELDS = {
    "method": "method",
    "base": "base",
    "experts": "experts",
    "lam": "lambda",
    "trim_density": "trim_density",
    "drop_p": "drop_p",
    "rng_seed": "rng_seed",
    "output_dtype": "output_dtype",
}


def effective_recipe(recipe_path, args) -> MergeRecipe:
    """Recipe file fields with any command-line flags laid over them."""
    doc = {}
    if recipe_path is not None:
        try:
            doc = json.loads(Path(recipe_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise RecipeError("recipe", f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise RecipeError("recipe", "must be a JSON object")
    for attr, key in _FLAG_FIELDS.items():
        value = getattr(args, attr, None)
        if value is not None:
            doc[key] = value
    if args.output is not None:
        doc["output_path"] = args.output
    return MergeRecipe.from_dict(doc)


def cmd_merge(args) -> int:
    recipe = effective_recipe(args.recipe, args)
    if recipe.output_path is None:
        raise RecipeError("output_path", "missing: pass --output or set it in the recipe")
    print(f"merging {len(recipe.experts)} experts with {recipe.method}", file=sys.stderr)
    manifest = run_recipe(recipe, max_shard_bytes=args.max_shard_bytes)
    provenance = json.loads((manifest.root / "provenance.json").read_text(encoding="utf-8"))
    _emit(
        {
            "output": str(manifest.root),
            "model_id": manifest.model_id,
            "tensors": len(manifest.tensors),
            "recipe_hash": provenance["recipe_hash"],
            "output_sha256": provenance["output_sha256"],
        }
    )
    return EXIT_OK


# --------------------------------------------------------------- inspect/diff


def cmd_inspect(args) -> int:
    manifest = open_checkpoint(args.checkpoint)
    if args.json:
        doc = json.loads(manifest.to_json_bytes())
        doc["total_params"] = manifest.total_params
        _emit(doc)
        return EXIT_OK
    print(f"model_id\t{manifest.model_id}")
    print(f"layout\t{manifest.layout}")
    print(f"tensors\t{len(manifest.tensors)}")
    print(f"params\t{manifest.total_params}")
    print(f"shards\t{len(manifest.shard_paths)}")
    for t in manifest.tensors:
        print(f"{t.name}\t{t.dtype}\t{'x'.join(map(str, t.shape)) or 'scalar'}\tshard={t.shard_id}\tbytes={t.byte_length}")
    return EXIT_OK


def _delta_stats(delta: np.ndarray, threshold: float) -> dict:
    active = np.abs(delta) > threshold
    d64 = delta.astype(np.float64)
    return {
        "numel": int(delta.size),
        "sq": float(np.dot(d64, d64)),
        "active": int(np.count_nonzero(active)),
        "positive": int(np.count_nonzero(active & (delta > 0))),
    }


def _describe(counts: dict) -> dict:
    """L2 norm, fraction of entries above threshold, and share of those that are positive."""
    return {
        "l2": math.sqrt(counts["sq"]),
        "nonzero_fraction": counts["active"] / counts["numel"] if counts["numel"] else 0.0,
        "positive_fraction": counts["positive"] / counts["active"] if counts["active"] else None,
    }


def _fraction(x: float | None) -> str:
    return "-" if x is None else f"{x:.6f}"


def cmd_diff(args) -> int:
    base = open_checkpoint(args.base)
    experts = [open_checkpoint(p) for p in args.experts]
    check_aligned(base, experts)
    rows = []
    totals = [dict.fromkeys(("numel", "sq", "active", "positive"), 0) for _ in experts]
    for name in base.names:
        b = read_tensor(base, name).values.reshape(-1)
        for e, total in zip(experts, totals):
            counts = _delta_stats(read_tensor(e, name).values.reshape(-1) - b, args.threshold)
            rows.append({"expert": e.model_id, "tensor": name} | _describe(counts))
            for k, v in counts.items():
                total[k] += v
    summary = [{"expert": e.model_id} | _describe(t) for e, t in zip(experts, totals)]
    conflict = None
    if len(experts) >= 2:
        stats = checkpoint_conflict_stats(base, experts)
        conflict = {"rate": stats.rate, "overlap": stats.overlap, "conflicts": stats.conflicts, "no_overlap": stats.no_overlap}
    if args.json:
        _emit({"experts": summary, "tensors": rows if args.stats else [], "conflict": conflict})
        return EXIT_OK
    if args.stats:
        print("expert\ttensor\tl2\tnonzero_fraction\tpositive_fraction")
        for r in rows:
            print(f"{r['expert']}\t{r['tensor']}\t{r['l2']:.6g}\t{r['nonzero_fraction']:.6f}\t{_fraction(r['positive_fraction'])}")
    print("expert\tl2\tnonzero_fraction\tpositive_fraction")
    for s in summary:
        print(f"{s['expert']}\t{s['l2']:.6g}\t{s['nonzero_fraction']:.6f}\t{_fraction(s['positive_fraction'])}")
    if conflict is not None:
        flag = "\tno_overlap" if conflict["no_overlap"] else ""
        print(f"conflict_rate\t{conflict['rate']:.6f}\toverlap={conflict['overlap']}\tconflicts={conflict['conflicts']}{flag}")
    return EXIT_OK


# ---------------------------------------------------------------- grid/report


def cmd_grid(args) -> int:
    config = GridConfig.from_json(args.config)
    if args.checkpoint_root is not None:
        config.checkpoint_root = args.checkpoint_root
    records = expand_grid(config)
    print(f"planned {len(records)} records")
    sys.stdout.flush()
    if args.dry_run:
        return EXIT_OK
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / GRID_CONFIG_COPY).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    result = run_grid(records, run_dir, resume=args.resume, workers=args.workers)
    print(f"executed {result.executed}, skipped {result.skipped}, failed {len(result.failed)}", file=sys.stderr)
    _emit(result.summary())
    return EXIT_USER if result.failed else EXIT_OK


def cmd_report(args) -> int:
    axes = {}
    exclusions, dropped = None, 0
    if args.summary is not None:
        summary = load_summary_csv(args.summary)
    else:
        if args.run_dir is None or args.scores is None:
            raise UsageError("report needs RUN_DIR and --scores, or --summary")
        run_dir = Path(args.run_dir)
        records = load_records(run_dir)
        if not records:
            raise FileNotFoundError(f"no experiment records under {run_dir / 'records'}")
        config_copy = run_dir / GRID_CONFIG_COPY
        if config_copy.is_file():
            config = GridConfig.from_json(config_copy)
            axes = {"methods": config.methods, "sizes": config.sizes, "expert_counts": config.expert_counts}
        agg = aggregate(normalize_records(records, ScoreTable.from_csv(args.scores)))
        summary, exclusions, dropped = agg.summary, agg.exclusions, agg.dropped_categories
        if args.write_summary is not None:
            write_summary_csv(summary, args.write_summary)
    text = emit_report(
        summary, args.format, args.output, exclusions=exclusions, dropped_categories=dropped, **axes
    )
    sys.stdout.write(text)
    if args.output is not None:
        print(f"report written to {args.output}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = FamilySpec.from_json(args.spec)
    family = gen_family(spec, args.out_dir, max_shard_bytes=args.max_shard_bytes)
    _emit(
        {
            "base": str(family.base.root),
            "experts": [str(e.root) for e in family.experts],
            "params": family.base.total_params,
        }
    )
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scalemerge", description="Merge fine-tuned checkpoints and run merge experiment grids.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("merge", help="merge checkpoints according to a recipe")
    p.add_argument("recipe", nargs="?", help="recipe JSON; flags override its fields")
    p.add_argument("-o", "--output", help="output checkpoint directory")
    p.add_argument("--method")
    p.add_argument("--base")
    p.add_argument("--expert", dest="experts", action="append", help="repeat once per expert")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--trim-density", type=float)
    p.add_argument("--drop-p", type=float)
    p.add_argument("--rng-seed", type=int)
    p.add_argument("--output-dtype")
    p.add_argument("--max-shard-bytes", type=int)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("inspect", help="print a checkpoint's manifest")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("diff", help="task-vector statistics of experts against a base")
    p.add_argument("experts", nargs="+")
    p.add_argument("--base", required=True)
    p.add_argument("--threshold", type=float, default=0.0, help="|delta| above this counts as nonzero")
    p.add_argument("--stats", action="store_true", help="also print per-tensor statistics")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("grid", help="expand and run an experiment grid")
    p.add_argument("config")
    p.add_argument("run_dir")
    p.add_argument("--resume", action="store_true", help="skip records already completed")
    p.add_argument("--dry-run", action="store_true", help="plan only")
    p.add_argument("--workers", type=int, help="parallel merges (default: $SCALEMERGE_WORKERS or 1)")
    p.add_argument("--checkpoint-root", help="override the config's checkpoint_root")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="normalize scores and render the summary table")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--scores", help="score CSV")
    p.add_argument("--summary", help="pre-aggregated summary CSV instead of a run")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--output", help="also write the report here")
    p.add_argument("--write-summary", help="write aggregated long-form rows here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic base/expert family")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.add_argument("--max-shard-bytes", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except RecipeError as exc:
        print(f"error: invalid recipe: {exc}", file=sys.stderr)
    except (UsageError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except Exception as exc:
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
