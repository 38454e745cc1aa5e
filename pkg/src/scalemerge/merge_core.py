"""Averaging, task arithmetic, TIES and DARE-TIES over aligned checkpoints.

The checkpoint-level merges are generators yielding one merged tensor at a
time in lexicographic name order.  All arithmetic is float32.  Per tensor the
resident data is bounded by ``N + 1`` tensor-sized buffers (N experts' task
vectors plus the base/output buffer); everything else works on fixed-size
chunks.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import __version__, rng
from .tensor_store import (
    CheckpointError,
    CheckpointManifest,
    DenseTensor,
    StructureMismatch,
    TensorMeta,
    canonical_dtype,
    check_aligned,
    checkpoint_digest,
    open_checkpoint,
    read_tensor,
    write_checkpoint,
)

METHODS = ("average", "task_arithmetic", "ties", "dare_ties")
DEFAULT_LAMBDA = 1.0
DEFAULT_TRIM_DENSITY = 0.2
DEFAULT_DROP_P = 0.9
DEFAULT_SEED = 0
CHUNK = 1 << 18

_NEEDS = {
    "average": set(),
    "task_arithmetic": {"lambda"},
    "ties": {"lambda", "trim_density"},
    "dare_ties": {"lambda", "trim_density", "drop_p", "rng_seed"},
}
_RECIPE_FIELDS = (
    "method", "lambda", "trim_density", "drop_p", "rng_seed",
    "base", "experts", "output_path", "output_dtype",
)  # fmt: skip


class RecipeError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ------------------------------------------------------------------- recipe


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


@dataclass(frozen=True)
class MergeRecipe:
    """Method plus hyperparameters and the checkpoints to combine.

    Hyperparameters the method needs are filled with defaults when omitted;
    ones it does not use must stay ``None``.
    """

    method: str
    experts: tuple[str, ...]
    base: str | None = None
    lam: float | None = None
    trim_density: float | None = None
    drop_p: float | None = None
    rng_seed: int | None = None
    output_path: str | None = None
    output_dtype: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise RecipeError("method", f"unknown method {self.method!r}; expected one of {METHODS}")
        experts = self.experts
        if isinstance(experts, str) or not isinstance(experts, Sequence) or not experts:
            raise RecipeError("experts", "must be a non-empty list of checkpoint ids")
        if not all(isinstance(e, str) for e in experts):
            raise RecipeError("experts", "entries must be strings")
        object.__setattr__(self, "experts", tuple(experts))
        needs = _NEEDS[self.method]
        if self.method != "average" and not self.base:
            raise RecipeError("base", f"method {self.method!r} needs a base checkpoint")
        if self.base is not None and not isinstance(self.base, str):
            raise RecipeError("base", "must be a string")
        values = {"lambda": self.lam, "trim_density": self.trim_density, "drop_p": self.drop_p, "rng_seed": self.rng_seed}
        for name, value in values.items():
            if name not in needs and value is not None:
                raise RecipeError(name, f"not used by method {self.method!r}")
        defaults = {"lambda": DEFAULT_LAMBDA, "trim_density": DEFAULT_TRIM_DENSITY, "drop_p": DEFAULT_DROP_P, "rng_seed": DEFAULT_SEED}
        attr = {"lambda": "lam", "trim_density": "trim_density", "drop_p": "drop_p", "rng_seed": "rng_seed"}
        for name in needs:
            if values[name] is None:
                object.__setattr__(self, attr[name], defaults[name])
        if self.lam is not None:
            if not _is_number(self.lam) or not math.isfinite(self.lam) or self.lam < 0:
                raise RecipeError("lambda", f"must be a finite non-negative number, got {self.lam!r}")
        if self.trim_density is not None:
            if not _is_number(self.trim_density) or not 0 < self.trim_density <= 1:
                raise RecipeError("trim_density", f"must lie in (0, 1], got {self.trim_density!r}")
        if self.drop_p is not None:
            if not _is_number(self.drop_p) or not 0 <= self.drop_p < 1:
                raise RecipeError("drop_p", f"must lie in [0, 1), got {self.drop_p!r}")
        if self.rng_seed is not None:
            if not isinstance(self.rng_seed, int) or isinstance(self.rng_seed, bool):
                raise RecipeError("rng_seed", f"must be an integer, got {self.rng_seed!r}")
            if not -(2**63) <= self.rng_seed < 2**64:
                raise RecipeError("rng_seed", "must fit in 64 bits")
        if self.output_dtype is not None:
            try:
                object.__setattr__(self, "output_dtype", canonical_dtype(self.output_dtype))
            except (CheckpointError, TypeError):
                raise RecipeError("output_dtype", f"unknown dtype {self.output_dtype!r}") from None

    @classmethod
    def from_dict(cls, doc: dict) -> MergeRecipe:
        if not isinstance(doc, dict):
            raise RecipeError("recipe", "must be a JSON object")
        unknown = sorted(set(doc) - set(_RECIPE_FIELDS))
        if unknown:
            raise RecipeError(unknown[0], "unknown field")
        if "method" not in doc:
            raise RecipeError("method", "missing")
        if "experts" not in doc:
            raise RecipeError("experts", "missing")
        return cls(
            method=doc["method"],
            experts=doc["experts"],
            base=doc.get("base"),
            lam=doc.get("lambda"),
            trim_density=doc.get("trim_density"),
            drop_p=doc.get("drop_p"),
            rng_seed=doc.get("rng_seed"),
            output_path=doc.get("output_path"),
            output_dtype=doc.get("output_dtype"),
        )

    @classmethod
    def from_json(cls, path) -> MergeRecipe:
        with open(path, encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise RecipeError("recipe", f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = {"method": self.method}
        for name, value in (
            ("lambda", self.lam),
            ("trim_density", self.trim_density),
            ("drop_p", self.drop_p),
            ("rng_seed", self.rng_seed),
            ("base", self.base),
        ):
            if value is not None:
                doc[name] = value
        doc["experts"] = list(self.experts)
        doc["output_path"] = self.output_path
        doc["output_dtype"] = self.output_dtype
        return doc

    def content_hash(self) -> str:
        """Digest of everything that determines the merged values (not where they go)."""
        doc = self.to_dict()
        doc.pop("output_path")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


# ------------------------------------------------------------------ kernels


def keep_count(n: int, density: float) -> int:
    """Number of entries a tensor of ``n`` elements keeps at ``density``."""
    if n == 0:
        return 0
    # the rounding guards against products like 0.7 * 10 = 7.000000000000001
    return min(n, max(1, math.ceil(round(density * n, 9))))


def accumulate(arrays: Iterable[np.ndarray]) -> np.ndarray:
    """Pairwise (binary-counter tree) sum of equally shaped float32 arrays.

    Pairwise at every ``n`` keeps the mean of identical copies within one ulp,
    which left-to-right summation misses from ``n = 7``.  Holds at most
    ``log2(n) + 1`` partial sums; the inputs are consumed and may be overwritten.
    """
    it = iter(arrays)
    stack: list[tuple[np.ndarray, int]] = []
    for a in it:
        level = 0
        while stack and stack[-1][1] == level:
            left, _ = stack.pop()
            left += a
            a = left
            level += 1
        stack.append((a, level))
    total = stack.pop()[0]
    while stack:
        left, _ = stack.pop()
        left += total
        total = left
    return total


def _magnitude_bits(chunk: np.ndarray) -> np.ndarray:
    return chunk.view(np.uint32) & np.uint32(0x7FFFFFFF)


def _select_threshold(flat: np.ndarray, k: int) -> tuple[int, int]:
    """Radix-select the k-th largest magnitude without sorting.

    Returns ``(t, take)``: keep every entry whose magnitude bits exceed ``t``
    and the first ``take`` entries (by index) whose bits equal ``t``.  Finite
    non-negative floats order the same way as their bit patterns.
    """
    hist = np.zeros(1 << 16, dtype=np.int64)
    for start in range(0, flat.size, CHUNK):
        hist += np.bincount(_magnitude_bits(flat[start : start + CHUNK]) >> np.uint32(16), minlength=1 << 16)
    from_top = np.cumsum(hist[::-1])
    pos = int(np.searchsorted(from_top, k))
    high = (1 << 16) - 1 - pos
    above = int(from_top[pos] - hist[high])

    hist[:] = 0
    for start in range(0, flat.size, CHUNK):
        mag = _magnitude_bits(flat[start : start + CHUNK])
        low = mag[(mag >> np.uint32(16)) == high] & np.uint32(0xFFFF)
        hist += np.bincount(low, minlength=1 << 16)
    from_top = np.cumsum(hist[::-1])
    pos = int(np.searchsorted(from_top, k - above))
    low = (1 << 16) - 1 - pos
    above += int(from_top[pos] - hist[low])
    return (high << 16) | low, k - above


def trim_inplace(flat: np.ndarray, density: float) -> None:
    """Zero all but the ``keep_count`` largest-magnitude entries of a flat float32 buffer.

    Equal magnitudes at the cut are resolved toward the lower flat index.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density out of range (0, 1]: {density!r}")
    k = keep_count(flat.size, density)
    if k >= flat.size:
        return
    threshold, take = _select_threshold(flat, k)
    t = np.uint32(threshold)
    seen = 0
    for start in range(0, flat.size, CHUNK):
        chunk = flat[start : start + CHUNK]
        mag = _magnitude_bits(chunk)
        drop = mag < t
        tied = mag == t
        n_tied = int(np.count_nonzero(tied))
        if n_tied:
            order = np.cumsum(tied) + seen
            drop |= tied & (order > take)
            seen += n_tied
        chunk[drop] = 0.0


def dare_inplace(flat: np.ndarray, drop_p: float, seed: int, tensor_name: str) -> None:
    """Bernoulli-drop entries with probability ``drop_p`` and rescale survivors by ``1/(1-drop_p)``."""
    if not 0 <= drop_p < 1:
        raise ValueError(f"drop_p must lie in [0, 1), got {drop_p!r}")
    if drop_p == 0:
        return
    denom = np.float32(1.0 - drop_p)
    for start in range(0, flat.size, CHUNK):
        chunk = flat[start : start + CHUNK]
        keep = rng.dare_keep_mask(seed, tensor_name, start, chunk.size, drop_p)
        chunk /= denom
        chunk[~keep] = 0.0


def elect_chunk(chunks: Sequence[np.ndarray]) -> np.ndarray:
    """Elected sign per entry: sign of the summed (trimmed) deltas, 0 for an exact-zero sum."""
    total = accumulate(c.copy() for c in chunks)
    return np.sign(total)


def disjoint_chunk(chunks: Sequence[np.ndarray], signs: np.ndarray) -> np.ndarray:
    """Mean over only the entries whose sign equals the elected sign; 0 where none match."""
    matches = [(np.sign(c) == signs) & (signs != 0) for c in chunks]
    count = np.zeros(signs.shape, dtype=np.float32)
    for m in matches:
        count += m
    total = accumulate(np.where(m, c, np.float32(0)) for m, c in zip(matches, chunks))
    out = np.zeros(signs.shape, dtype=np.float32)
    np.divide(total, count, out=out, where=count > 0)
    return out


# ------------------------------------------------------- in-memory task vectors


@dataclass
class TaskVector:
    base_id: str
    expert_id: str
    deltas: dict[str, np.ndarray]

    def copy(self) -> TaskVector:
        return TaskVector(self.base_id, self.expert_id, {k: v.copy() for k, v in self.deltas.items()})


@dataclass
class TrimmedTaskVector(TaskVector):
    density: float = 1.0


@dataclass
class SignVector:
    signs: dict[str, np.ndarray] = field(default_factory=dict)


def _check_vectors(vectors: Sequence[TaskVector]) -> None:
    if not vectors:
        raise ValueError("need at least one task vector")
    ref = {k: v.shape for k, v in vectors[0].deltas.items()}
    for tv in vectors[1:]:
        got = {k: v.shape for k, v in tv.deltas.items()}
        if got != ref:
            raise StructureMismatch(f"structure mismatch between task vectors {vectors[0].expert_id!r} and {tv.expert_id!r}")


def compute_task_vector(expert: CheckpointManifest, base: CheckpointManifest) -> TaskVector:
    """Load ``expert - base`` for every tensor (whole model in memory)."""
    check_aligned(base, [expert])
    deltas = {}
    for name in sorted(base.names):
        delta = read_tensor(expert, name).values
        delta -= read_tensor(base, name).values
        deltas[name] = delta
    return TaskVector(base.model_id, expert.model_id, deltas)


def trim_by_magnitude(tv: TaskVector, density: float) -> TrimmedTaskVector:
    if not 0 < density <= 1:
        raise ValueError(f"density out of range (0, 1]: {density!r}")
    out = {}
    for name, delta in tv.deltas.items():
        flat = np.array(delta, dtype=np.float32).reshape(-1)
        trim_inplace(flat, density)
        out[name] = flat.reshape(delta.shape)
    return TrimmedTaskVector(tv.base_id, tv.expert_id, out, density=density)


def elect_signs(trimmed: Sequence[TaskVector]) -> SignVector:
    _check_vectors(trimmed)
    signs = {}
    for name in trimmed[0].deltas:
        chunks = [np.asarray(tv.deltas[name], dtype=np.float32).reshape(-1) for tv in trimmed]
        signs[name] = elect_chunk(chunks).astype(np.int8).reshape(trimmed[0].deltas[name].shape)
    return SignVector(signs)


def disjoint_merge(trimmed: Sequence[TaskVector], signs: SignVector) -> TaskVector:
    _check_vectors(trimmed)
    if {k: v.shape for k, v in signs.signs.items()} != {k: v.shape for k, v in trimmed[0].deltas.items()}:
        raise StructureMismatch("structure mismatch between sign vector and task vectors")
    out = {}
    for name, ref in trimmed[0].deltas.items():
        chunks = [np.asarray(tv.deltas[name], dtype=np.float32).reshape(-1) for tv in trimmed]
        s = signs.signs[name].reshape(-1).astype(np.float32)
        out[name] = disjoint_chunk(chunks, s).reshape(ref.shape)
    return TaskVector(trimmed[0].base_id, "disjoint-merge", out)


def dare_prune(tv: TaskVector, drop_p: float, rng_seed: int) -> TaskVector:
    if not 0 <= drop_p < 1:
        raise ValueError(f"drop_p must lie in [0, 1), got {drop_p!r}")
    out = {}
    for name, delta in tv.deltas.items():
        flat = np.array(delta, dtype=np.float32).reshape(-1)
        dare_inplace(flat, drop_p, rng_seed, name)
        out[name] = flat.reshape(delta.shape)
    return TaskVector(tv.base_id, tv.expert_id, out)


# --------------------------------------------------------- checkpoint merges


def _read_flat(manifest: CheckpointManifest, name: str) -> np.ndarray:
    return read_tensor(manifest, name).values.reshape(-1)


def _emit(meta: TensorMeta, flat: np.ndarray) -> DenseTensor:
    return DenseTensor(TensorMeta(meta.name, meta.dtype, meta.shape), flat.reshape(meta.shape))


def _check_lambda(lam: float) -> None:
    if not _is_number(lam) or not math.isfinite(lam):
        raise ValueError(f"lambda must be finite, got {lam!r}")


def _check_inputs(base: CheckpointManifest | None, experts: Sequence[CheckpointManifest]) -> None:
    if not experts:
        raise ValueError("empty expert list")
    check_aligned(base if base is not None else experts[0], experts)


def merge_average(experts: Sequence[CheckpointManifest]) -> Iterator[DenseTensor]:
    """Elementwise mean of the experts; the base model is not consulted."""
    experts = list(experts)
    _check_inputs(None, experts)
    return _average_stream(experts)


def _average_stream(experts):
    n = len(experts)
    ref = experts[0]
    for name in sorted(ref.names):
        total = accumulate(_read_flat(e, name) for e in experts)
        total /= np.float32(n)
        out = _emit(ref.meta(name), total)
        total = None
        yield out
        out = None


def merge_task_arithmetic(base: CheckpointManifest, experts: Sequence[CheckpointManifest], lam: float = DEFAULT_LAMBDA) -> Iterator[DenseTensor]:
    """``base + lam * sum(expert - base)`` per parameter."""
    experts = list(experts)
    _check_lambda(lam)
    _check_inputs(base, experts)
    return _task_arithmetic_stream(base, experts, lam)


def _task_arithmetic_stream(base, experts, lam):
    for name in sorted(base.names):
        base_flat = _read_flat(base, name)

        def deltas():
            for e in experts:
                d = _read_flat(e, name)
                d -= base_flat
                yield d

        total = accumulate(deltas())
        total *= np.float32(lam)
        total += base_flat
        base_flat = None
        out = _emit(base.meta(name), total)
        total = None
        yield out
        out = None


def merge_ties(
    base: CheckpointManifest,
    experts: Sequence[CheckpointManifest],
    lam: float = DEFAULT_LAMBDA,
    density: float = DEFAULT_TRIM_DENSITY,
) -> Iterator[DenseTensor]:
    """Trim, elect signs, disjoint mean, scale by ``lam`` and add to the base."""
    experts = list(experts)
    _check_lambda(lam)
    if not 0 < density <= 1:
        raise ValueError(f"density out of range (0, 1]: {density!r}")
    _check_inputs(base, experts)
    return _ties_stream(base, experts, lam, density, drop_p=0.0, subseeds=None)


def merge_dare_ties(
    base: CheckpointManifest,
    experts: Sequence[CheckpointManifest],
    lam: float = DEFAULT_LAMBDA,
    density: float = DEFAULT_TRIM_DENSITY,
    drop_p: float = DEFAULT_DROP_P,
    rng_seed: int = DEFAULT_SEED,
    expert_ids: Sequence[str] | None = None,
) -> Iterator[DenseTensor]:
    """DARE-prune each raw task vector, then run the TIES pipeline.

    Each expert's mask stream is keyed by ``rng_seed`` and the expert's id
    (``expert_ids``, defaulting to the manifests' model ids) plus its
    occurrence number, never by list position.
    """
    experts = list(experts)
    _check_lambda(lam)
    if not 0 < density <= 1:
        raise ValueError(f"density out of range (0, 1]: {density!r}")
    if not 0 <= drop_p < 1:
        raise ValueError(f"drop_p must lie in [0, 1), got {drop_p!r}")
    _check_inputs(base, experts)
    ids = list(expert_ids) if expert_ids is not None else [e.model_id for e in experts]
    if len(ids) != len(experts):
        raise ValueError("expert_ids must match the expert list")
    subseeds = [rng.expert_subseed(rng_seed, key) for key in rng.expert_keys(ids)]
    return _ties_stream(base, experts, lam, density, drop_p, subseeds)


def _ties_stream(base, experts, lam, density, drop_p, subseeds):
    scale = np.float32(lam)
    for name in sorted(base.names):
        base_flat = _read_flat(base, name)
        trimmed = []
        for i, e in enumerate(experts):
            tv = _read_flat(e, name)
            tv -= base_flat
            if drop_p:
                dare_inplace(tv, drop_p, subseeds[i], name)
            trim_inplace(tv, density)
            trimmed.append(tv)
            tv = None
        for start in range(0, base_flat.size, CHUNK):
            chunks = [t[start : start + CHUNK] for t in trimmed]
            merged = disjoint_chunk(chunks, elect_chunk(chunks))
            merged *= scale
            base_flat[start : start + CHUNK] += merged
        trimmed = chunks = merged = None
        out = _emit(base.meta(name), base_flat)
        base_flat = None
        yield out
        out = None


def merge_checkpoints(
    recipe: MergeRecipe, base: CheckpointManifest | None, experts: Sequence[CheckpointManifest]
) -> Iterator[DenseTensor]:
    """Dispatch on ``recipe.method``."""
    if recipe.method == "average":
        return merge_average(experts)
    if base is None:
        raise ValueError(f"method {recipe.method!r} needs a base checkpoint")
    if recipe.method == "task_arithmetic":
        return merge_task_arithmetic(base, experts, recipe.lam)
    if recipe.method == "ties":
        return merge_ties(base, experts, recipe.lam, recipe.trim_density)
    return merge_dare_ties(base, experts, recipe.lam, recipe.trim_density, recipe.drop_p, recipe.rng_seed)


def open_recipe_inputs(recipe: MergeRecipe) -> tuple[CheckpointManifest | None, list[CheckpointManifest]]:
    base = open_checkpoint(recipe.base) if recipe.method != "average" else None
    experts = [open_checkpoint(p) for p in recipe.experts]
    return base, experts


def run_recipe(
    recipe: MergeRecipe,
    output_path=None,
    *,
    max_shard_bytes: int | None = None,
    provenance: bool = True,
) -> CheckpointManifest:
    """Open the recipe's inputs, merge, write the result and a provenance sidecar."""
    target = output_path if output_path is not None else recipe.output_path
    if target is None:
        raise RecipeError("output_path", "missing")
    base, experts = open_recipe_inputs(recipe)
    kwargs = {} if max_shard_bytes is None else {"max_shard_bytes": max_shard_bytes}
    recipe_hash = recipe.content_hash()
    manifest = write_checkpoint(
        merge_checkpoints(recipe, base, experts),
        recipe.output_dtype,
        target,
        model_id=f"merged-{recipe_hash[:16]}",
        **kwargs,
    )
    if provenance:
        sidecar = {
            "tool": "scalemerge",
            "version": __version__,
            "recipe": recipe.to_dict() | {"output_path": str(target)},
            "recipe_hash": recipe_hash,
            "inputs": {
                "base": None if base is None else {"path": recipe.base, "sha256": checkpoint_digest(base)},
                "experts": [{"path": p, "sha256": checkpoint_digest(e)} for p, e in zip(recipe.experts, experts)],
            },
            "output_sha256": checkpoint_digest(manifest),
        }
        (manifest.root / "provenance.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return manifest
