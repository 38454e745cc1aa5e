"""Factorial experiment grids: expansion, seeded expert selection, resumable execution."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import traceback
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import rng
from .merge_core import METHODS, MergeRecipe, run_recipe
from .taxonomy import (
    HELD_IN_CATEGORIES,
    STANDARD_BASE_MODELS,
    STANDARD_EXPERT_COUNTS,
    STANDARD_METHODS,
    STANDARD_SEEDS,
    STANDARD_SIZES,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "SCALEMERGE_WORKERS"
_AXES = ("base_models", "sizes", "methods", "expert_counts", "seeds")


class GridError(ValueError):
    pass


@dataclass
class GridConfig:
    base_models: list[str]
    sizes: list[str]
    methods: list[str]
    expert_counts: list[int]
    seeds: list[int]
    category_pool: list[str] = field(default_factory=lambda: list(HELD_IN_CATEGORIES))
    checkpoint_root: str = "checkpoints"
    lam: float = 1.0
    trim_density: float = 0.2
    drop_p: float = 0.9
    output_dtype: str | None = None

    def __post_init__(self):
        for axis in _AXES + ("category_pool",):
            values = list(getattr(self, axis))
            if not values:
                raise GridError(f"empty axis: {axis}")
            setattr(self, axis, values)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise GridError(f"unknown methods: {bad}")
        if len(set(self.category_pool)) != len(self.category_pool):
            raise GridError("category_pool has duplicates")
        if len(set(self.seeds)) != len(self.seeds):
            raise GridError("seeds must be distinct")
        for n in self.expert_counts:
            if not 1 <= n <= len(self.category_pool):
                raise GridError(f"expert count {n} outside 1..{len(self.category_pool)}")

    @classmethod
    def standard(cls, checkpoint_root: str = "checkpoints") -> GridConfig:
        """2 base models x 4 sizes x 4 methods x {2,4,6,8} experts x 3 seeds."""
        return cls(
            list(STANDARD_BASE_MODELS), list(STANDARD_SIZES), list(STANDARD_METHODS),
            list(STANDARD_EXPERT_COUNTS), list(STANDARD_SEEDS), checkpoint_root=checkpoint_root,
        )  # fmt: skip

    @classmethod
    def from_dict(cls, doc: dict) -> GridConfig:
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise GridError(f"unknown grid config fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise GridError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> GridConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__}
        doc["lambda"] = doc.pop("lam")
        return doc


def select_expert_subset(seed: int, n: int, category_pool: Sequence[str]) -> list[str]:
    """Seeded Fisher-Yates shuffle of the pool, then the first ``n``.

    Depends only on ``(seed, n, pool)``, and the selection for a smaller ``n``
    is always a prefix of the selection for a larger one.
    """
    pool = list(category_pool)
    if not 1 <= n <= len(pool):
        raise GridError(f"n={n} outside 1..{len(pool)}")
    key = rng.derive_key("subset", seed)
    for i in range(len(pool) - 1, 0, -1):
        j = rng.randbelow(key, i, i + 1)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:n]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class ExperimentRecord:
    base_model: str
    size: str
    method: str
    n_experts: int
    seed: int
    selected_categories: list[str]
    recipe: MergeRecipe
    base_id: str
    expert_ids: list[str]
    status: str = "planned"
    error: str | None = None
    started_at: str | None = None
    finished_at: str | None = None

    @property
    def recipe_hash(self) -> str:
        return self.recipe.content_hash()

    @property
    def record_key(self) -> str:
        """Recipe digest plus the grid seed, so seed-free methods never collide across seeds."""
        blob = json.dumps({"recipe": self.recipe_hash, "seed": self.seed}, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    @property
    def output_id(self) -> str:
        return self.record_key

    def to_dict(self) -> dict:
        return {
            "record_key": self.record_key,
            "recipe_hash": self.recipe_hash,
            "output_id": self.output_id,
            "base_model": self.base_model,
            "size": self.size,
            "method": self.method,
            "n_experts": self.n_experts,
            "seed": self.seed,
            "selected_categories": list(self.selected_categories),
            "base_id": self.base_id,
            "expert_ids": list(self.expert_ids),
            "recipe": self.recipe.to_dict(),
            "status": self.status,
            "error": self.error,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentRecord:
        return cls(
            base_model=doc["base_model"],
            size=doc["size"],
            method=doc["method"],
            n_experts=doc["n_experts"],
            seed=doc["seed"],
            selected_categories=list(doc["selected_categories"]),
            recipe=MergeRecipe.from_dict(doc["recipe"]),
            base_id=doc["base_id"],
            expert_ids=list(doc["expert_ids"]),
            status=doc.get("status", "planned"),
            error=doc.get("error"),
            started_at=doc.get("started_at"),
            finished_at=doc.get("finished_at"),
        )


def checkpoint_path(root, model_id: str) -> str:
    return str(Path(root) / model_id)


def expand_grid(config: GridConfig) -> list[ExperimentRecord]:
    """Cartesian product of the grid axes, base model outermost and seed innermost."""
    records = []
    for base_model, size, method, n, seed in itertools.product(
        config.base_models, config.sizes, config.methods, config.expert_counts, config.seeds
    ):
        categories = select_expert_subset(seed, n, config.category_pool)
        base_id = f"{base_model}/{size}/base"
        expert_ids = [f"{base_model}/{size}/{c}" for c in categories]
        hyper = {}
        if method != "average":
            hyper["lam"] = config.lam
        if method in ("ties", "dare_ties"):
            hyper["trim_density"] = config.trim_density
        if method == "dare_ties":
            hyper["drop_p"] = config.drop_p
            hyper["rng_seed"] = seed
        recipe = MergeRecipe(
            method=method,
            experts=[checkpoint_path(config.checkpoint_root, e) for e in expert_ids],
            base=checkpoint_path(config.checkpoint_root, base_id) if method != "average" else None,
            output_dtype=config.output_dtype,
            **hyper,
        )
        records.append(
            ExperimentRecord(base_model, size, method, n, seed, categories, recipe, base_id, expert_ids)
        )
    return records


@dataclass
class RunResult:
    total: int
    completed: list[str]
    failed: list[dict]
    executed: int
    skipped: int

    def summary(self) -> dict:
        """Persisted summary; excludes per-invocation activity counts so resumed runs match."""
        return {
            "total": self.total,
            "completed": sorted(self.completed),
            "failed": sorted(self.failed, key=lambda f: f["record_key"]),
        }


Executor = Callable[[ExperimentRecord, Path], object]


def default_executor(record: ExperimentRecord, output_dir: Path):
    return run_recipe(record.recipe, output_dir)


def record_path(run_dir, record_key: str) -> Path:
    return Path(run_dir) / "records" / f"{record_key}.json"


def output_dir(run_dir, record_key: str) -> Path:
    return Path(run_dir) / "checkpoints" / record_key


def load_records(run_dir) -> list[ExperimentRecord]:
    files = sorted((Path(run_dir) / "records").glob("*.json"))
    return [ExperimentRecord.from_dict(json.loads(f.read_text(encoding="utf-8"))) for f in files]


def _is_done(run_dir, record: ExperimentRecord) -> bool:
    path = record_path(run_dir, record.record_key)
    if not path.is_file():
        return False
    try:
        stored = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return False
    return stored.get("status") == "completed" and stored.get("recipe_hash") == record.recipe_hash


def write_record(run_dir, record: ExperimentRecord) -> None:
    path = record_path(run_dir, record.record_key)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_grid(
    records: Sequence[ExperimentRecord],
    run_dir,
    executor: Executor | None = None,
    resume: bool = False,
    workers: int | None = None,
) -> RunResult:
    """Execute every record, isolating failures; with ``resume`` skip completed ones."""
    executor = executor or default_executor
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    workers = workers or default_workers()

    todo, completed, skipped = [], [], 0
    for record in records:
        if resume and _is_done(run_dir, record):
            completed.append(record.record_key)
            skipped += 1
        else:
            todo.append(record)

    def run_one(record: ExperimentRecord) -> tuple[str, str | None]:
        record.started_at = _now()
        try:
            executor(record, output_dir(run_dir, record.record_key))
        except Exception as exc:  # one bad cell must not abort the grid
            record.status = "failed"
            record.error = f"{type(exc).__name__}: {exc}"
            log.debug("record %s failed\n%s", record.record_key, traceback.format_exc())
        else:
            record.status = "completed"
            record.error = None
        record.finished_at = _now()
        write_record(run_dir, record)
        log.info("%s %s/%s/%s n=%d seed=%d", record.status, record.base_model, record.size, record.method, record.n_experts, record.seed)
        return record.record_key, record.error

    failed = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, todo))
    else:
        outcomes = [run_one(r) for r in todo]
    for key, error in outcomes:
        if error is None:
            completed.append(key)
        else:
            failed.append({"record_key": key, "error": error})
            log.warning("record %s failed: %s", key, error)

    result = RunResult(len(records), completed, failed, executed=len(todo), skipped=skipped)
    (run_dir / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n", encoding="utf-8")
    return result


def synthesize_checkpoints(config: GridConfig, tensor_shapes, rng_seed: int = 0, **spec_fields) -> None:
    """Fill ``config.checkpoint_root`` with one synthetic family per (base model, size).

    Model ids match the grid's logical ids, so records resolve without remapping.
    """
    from .synthetic import FamilySpec, gen_family

    for i, (base_model, size) in enumerate(itertools.product(config.base_models, config.sizes)):
        spec = FamilySpec(
            rng_seed=rng.derive_key("grid-family", rng_seed, i),
            tensor_shapes=list(tensor_shapes),
            n_experts=len(config.category_pool),
            family_id=f"{base_model}/{size}",
            **spec_fields,
        )
        gen_family(spec, Path(config.checkpoint_root) / base_model / size, expert_names=config.category_pool)
