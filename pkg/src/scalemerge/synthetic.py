"""Synthetic base/expert families and a naive whole-model reference merge.

Families have controlled support overlap and sign-conflict structure, which
is what TIES and DARE actually react to.  The reference merge flattens the
whole model into one buffer and recomputes every method with plain loops and
a stable sort; it shares only the counter-based RNG with ``merge_core``.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import rng
from .merge_core import MergeRecipe, TaskVector
from .tensor_store import (
    CheckpointManifest,
    CheckpointWriter,
    DenseTensor,
    check_aligned,
    float32_to_bfloat16_bits,
    read_tensor,
)


class InfeasibleSpec(ValueError):
    def __init__(self, message: str, max_feasible_rate: float):
        super().__init__(f"{message} (maximum feasible conflict_rate: {max_feasible_rate})")
        self.max_feasible_rate = max_feasible_rate


@dataclass
class FamilySpec:
    rng_seed: int
    tensor_shapes: list[tuple[int, ...]]
    n_experts: int
    delta_scale: float = 0.01
    delta_sparsity: float = 1.0  # fraction of entries each expert changes
    conflict_rate: float = 0.0
    dtype: str = "float32"
    family_id: str = "family"
    min_magnitude: float = 0.1  # floor on |delta| / delta_scale

    def __post_init__(self):
        self.tensor_shapes = [tuple(int(s) for s in shape) for shape in self.tensor_shapes]
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if not self.delta_scale > 0:
            raise ValueError("delta_scale must be positive")
        if not 0 < self.delta_sparsity <= 1:
            raise ValueError("delta_sparsity must lie in (0, 1]")
        if not 0 <= self.conflict_rate <= 1:
            raise ValueError("conflict_rate must lie in [0, 1]")
        if any(s < 0 for shape in self.tensor_shapes for s in shape):
            raise ValueError("tensor extents must be non-negative")

    @property
    def tensor_names(self) -> list[str]:
        return [f"layer{i:03d}.weight" for i in range(len(self.tensor_shapes))]

    @classmethod
    def from_json(cls, path) -> FamilySpec:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown family spec fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["tensor_shapes"] = [list(s) for s in self.tensor_shapes]
        return doc


@dataclass
class Family:
    spec: FamilySpec
    base: CheckpointManifest
    experts: list[CheckpointManifest] = field(default_factory=list)


def _support(spec: FamilySpec, expert: int, name: str, n: int) -> np.ndarray:
    if spec.delta_sparsity >= 1:
        return np.ones(n, dtype=bool)
    m = max(1, round(spec.delta_sparsity * n)) if n else 0
    mask = np.zeros(n, dtype=bool)
    if m:
        keys = rng.bits(rng.derive_key(spec.rng_seed, "support", expert, name), 0, n)
        mask[np.argpartition(keys, m - 1)[:m]] = True
    return mask


def _family_tensor(spec: FamilySpec, name: str, shape) -> tuple[np.ndarray, list[np.ndarray]]:
    """Base values and every expert's delta for one tensor."""
    n = math.prod(shape)
    seed = spec.rng_seed
    base = rng.normal(rng.derive_key(seed, "base", name), 0, n).astype(np.float32)
    supports = [_support(spec, i, name, n) for i in range(spec.n_experts)]
    direction = np.where(rng.bits(rng.derive_key(seed, "direction", name), 0, n) & np.uint64(1), 1.0, -1.0)

    counts = np.zeros(n, dtype=np.int64)
    for s in supports:
        counts += s
    overlap = np.flatnonzero(counts >= 2)
    chosen = np.zeros(n, dtype=bool)
    n_conflicts = round(spec.conflict_rate * overlap.size)
    if n_conflicts:
        rank_keys = rng.bits(rng.derive_key(seed, "conflict", name), 0, n)[overlap]
        chosen[overlap[np.argsort(rank_keys, kind="stable")[:n_conflicts]]] = True
    # which supporter (by order among supporters) gets its sign flipped
    flip_rank = rng.bits(rng.derive_key(seed, "flip", name), 0, n) % np.maximum(counts, 1).astype(np.uint64)

    deltas = []
    seen = np.zeros(n, dtype=np.int64)
    for i, s in enumerate(supports):
        z = np.abs(rng.normal(rng.derive_key(seed, "magnitude", i, name), 0, n))
        mag = spec.delta_scale * np.maximum(z, spec.min_magnitude)
        flip = chosen & s & (seen == flip_rank.astype(np.int64))
        sign = np.where(flip, -direction, direction)
        deltas.append(np.where(s, sign * mag, 0.0).astype(np.float32))
        seen += s
    return base.reshape(shape), [d.reshape(shape) for d in deltas]


def _check_feasible(spec: FamilySpec) -> None:
    if spec.conflict_rate == 0:
        return
    if spec.n_experts < 2:
        raise InfeasibleSpec("conflicts need at least two experts", 0.0)
    overlap = 0
    for name, shape in zip(spec.tensor_names, spec.tensor_shapes):
        n = math.prod(shape)
        counts = np.zeros(n, dtype=np.int64)
        for i in range(spec.n_experts):
            counts += _support(spec, i, name, n)
        overlap += int(np.count_nonzero(counts >= 2))
        if overlap:
            return
    raise InfeasibleSpec("expert supports never overlap at this delta_sparsity", 0.0)


def gen_family(
    spec: FamilySpec,
    out_dir,
    max_shard_bytes: int | None = None,
    expert_names: Sequence[str] | None = None,
) -> Family:
    """Write ``base/`` and one directory per expert (``expert-{i}/`` by default) under ``out_dir``.

    Model ids are ``{family_id}/{directory name}``.

    Each expert equals the base plus a sparse delta; among parameters where
    two or more experts are nonzero, exactly ``round(conflict_rate * overlap)``
    per tensor carry opposite signs.
    """
    _check_feasible(spec)
    names = list(expert_names) if expert_names is not None else [f"expert-{i}" for i in range(spec.n_experts)]
    if len(names) != spec.n_experts or len(set(names)) != len(names) or "base" in names:
        raise ValueError("expert_names must be n_experts distinct names other than 'base'")
    out_dir = Path(out_dir)
    kwargs = {} if max_shard_bytes is None else {"max_shard_bytes": max_shard_bytes}
    base_writer = CheckpointWriter(out_dir / "base", model_id=f"{spec.family_id}/base", output_dtype=spec.dtype, **kwargs)
    writers = [
        CheckpointWriter(out_dir / name, model_id=f"{spec.family_id}/{name}", output_dtype=spec.dtype, **kwargs)
        for name in names
    ]
    for name, shape in sorted(zip(spec.tensor_names, spec.tensor_shapes)):
        base, deltas = _family_tensor(spec, name, shape)
        base_writer.add(DenseTensor.from_array(name, base, spec.dtype))
        if spec.dtype != "float32":
            # experts are built on the base as it is stored
            base = _quantize(base, spec.dtype)
        for w, d in zip(writers, deltas):
            expert = base + d
            w.add(DenseTensor.from_array(name, expert, spec.dtype))
        deltas = None
    base_manifest = base_writer.close()
    return Family(spec, base_manifest, [w.close() for w in writers])


def _quantize(values: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == "bfloat16":
        return (float32_to_bfloat16_bits(values).astype(np.uint32) << np.uint32(16)).view(np.float32).reshape(values.shape)
    return values.astype(np.float16).astype(np.float32)


# ------------------------------------------------------------ conflict diagnostic


@dataclass(frozen=True)
class ConflictStats:
    overlap: int
    conflicts: int

    @property
    def no_overlap(self) -> bool:
        return self.overlap == 0

    @property
    def rate(self) -> float:
        return self.conflicts / self.overlap if self.overlap else 0.0


def _conflict_counts(arrays: Sequence[np.ndarray]) -> tuple[int, int]:
    nonzero = np.zeros(arrays[0].shape, dtype=np.int64)
    pos = np.zeros(arrays[0].shape, dtype=bool)
    neg = np.zeros(arrays[0].shape, dtype=bool)
    for a in arrays:
        nonzero += a != 0
        pos |= a > 0
        neg |= a < 0
    overlap = nonzero >= 2
    return int(np.count_nonzero(overlap)), int(np.count_nonzero(overlap & pos & neg))


def conflict_stats(tvs: Sequence[TaskVector | Mapping[str, np.ndarray] | np.ndarray]) -> ConflictStats:
    """Overlap and conflict counts over aligned task vectors.

    A parameter overlaps when at least two vectors are nonzero there, and
    conflicts when two of those nonzero entries have opposite signs.
    """
    if len(tvs) < 2:
        raise ValueError("conflict rate needs at least two task vectors")
    maps = []
    for tv in tvs:
        if isinstance(tv, TaskVector):
            maps.append(tv.deltas)
        elif isinstance(tv, Mapping):
            maps.append(tv)
        else:
            maps.append({"": np.asarray(tv)})
    names = sorted(maps[0])
    if any(sorted(m) != names for m in maps):
        raise ValueError("task vectors are not aligned")
    overlap = conflicts = 0
    for name in names:
        o, c = _conflict_counts([np.asarray(m[name]).reshape(-1) for m in maps])
        overlap += o
        conflicts += c
    return ConflictStats(overlap, conflicts)


def conflict_rate(tvs) -> float:
    """Fraction of overlapping parameters with a sign conflict (0.0 when nothing overlaps)."""
    return conflict_stats(tvs).rate


def checkpoint_conflict_stats(base: CheckpointManifest, experts: Sequence[CheckpointManifest]) -> ConflictStats:
    """Same as :func:`conflict_stats`, one tensor at a time from disk."""
    if len(experts) < 2:
        raise ValueError("conflict rate needs at least two experts")
    check_aligned(base, experts)
    overlap = conflicts = 0
    for name in sorted(base.names):
        b = read_tensor(base, name).values.reshape(-1)
        deltas = [read_tensor(e, name).values.reshape(-1) - b for e in experts]
        o, c = _conflict_counts(deltas)
        overlap += o
        conflicts += c
    return ConflictStats(overlap, conflicts)


# ---------------------------------------------------------------- reference


def _flatten(manifest: CheckpointManifest, names: list[str]) -> np.ndarray:
    parts = [read_tensor(manifest, n).values.reshape(-1) for n in names]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


def _reference_keep(n: int, density: float) -> int:
    if n == 0:
        return 0
    x = Fraction(density) * n
    nearest = round(x)
    k = nearest if abs(x - nearest) < Fraction(1, 2 * 10**9) else math.ceil(x)
    return min(n, max(1, k))


def reference_merge(
    recipe: MergeRecipe, base: CheckpointManifest | None, experts: Sequence[CheckpointManifest]
) -> dict[str, np.ndarray]:
    """Whole-model dense recomputation of ``recipe`` for small inputs."""
    if not experts:
        raise ValueError("empty expert list")
    ref = base if base is not None else experts[0]
    check_aligned(ref, experts)
    names = sorted(ref.names)
    shapes = [ref.meta(n).shape for n in names]
    sizes = [math.prod(s) for s in shapes]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    thetas = [_flatten(e, names) for e in experts]
    n_exp = len(experts)
    lam = np.float32(recipe.lam) if recipe.lam is not None else None

    if recipe.method == "average":
        total = thetas[0].copy()
        for t in thetas[1:]:
            total = total + t
        merged = total / np.float32(n_exp)
    else:
        theta_base = _flatten(base, names)
        taus = [t - theta_base for t in thetas]
        if recipe.method == "task_arithmetic":
            total = taus[0].copy()
            for t in taus[1:]:
                total = total + t
            merged = theta_base + lam * total
        else:
            if recipe.method == "dare_ties" and recipe.drop_p > 0:
                keys = rng.expert_keys([e.model_id for e in experts])
                for i in range(n_exp):
                    subseed = rng.expert_subseed(recipe.rng_seed, keys[i])
                    for j, name in enumerate(names):
                        lo, hi = offsets[j], offsets[j + 1]
                        keep = rng.dare_keep_mask(subseed, name, 0, hi - lo, recipe.drop_p).astype(np.float32)
                        taus[i][lo:hi] = keep * taus[i][lo:hi] / np.float32(1.0 - recipe.drop_p)
            for tau in taus:
                for j in range(len(names)):
                    seg = tau[offsets[j] : offsets[j + 1]]
                    k = _reference_keep(seg.size, recipe.trim_density)
                    order = np.argsort(-np.abs(seg), kind="stable")
                    seg[order[k:]] = 0.0
            total = taus[0].copy()
            for t in taus[1:]:
                total = total + t
            gamma = np.sign(total)
            num = np.zeros_like(total)
            cnt = np.zeros_like(total)
            for t in taus:
                match = (np.sign(t) == gamma) & (gamma != 0)
                num = num + np.where(match, t, np.float32(0))
                cnt = cnt + match.astype(np.float32)
            mean = np.where(cnt > 0, num / np.maximum(cnt, np.float32(1)), np.float32(0))
            merged = theta_base + lam * mean
    return {name: merged[offsets[j] : offsets[j + 1]].reshape(shapes[j]) for j, name in enumerate(names)}


def max_relative_error(got: Mapping[str, np.ndarray], want: Mapping[str, np.ndarray]) -> float:
    """``max|got - want| / max|want|`` over all tensors (absolute error when ``want`` is all zero)."""
    if set(got) != set(want):
        raise ValueError("tensor name sets differ")
    num = den = 0.0
    for name in want:
        a = np.asarray(got[name], dtype=np.float64).reshape(-1)
        b = np.asarray(want[name], dtype=np.float64).reshape(-1)
        if b.size:
            num = max(num, float(np.max(np.abs(a - b))))
            den = max(den, float(np.max(np.abs(b))))
    return num / den if den > 0 else num
