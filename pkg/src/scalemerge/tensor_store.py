"""Sharded checkpoint IO.

A checkpoint directory holds ``manifest.json`` plus raw little-endian shard
files with no header.  Single-file safetensors checkpoints are accepted on
read.  Tensors are always handed out as float32, and reads/writes of the
narrow dtypes are converted in fixed-size chunks so that resident tensor data
never exceeds one tensor plus a constant.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
DEFAULT_MAX_SHARD_BYTES = 1 << 30
IO_CHUNK_ELEMENTS = 1 << 16  # conversion scratch stays a few hundred KB

DTYPE_SIZES = {"float32": 4, "bfloat16": 2, "float16": 2}
_TO_TAG = {"float32": "f32", "bfloat16": "bf16", "float16": "f16"}
_FROM_TAG = {v: k for k, v in _TO_TAG.items()}
_SAFETENSORS_TAGS = {"F32": "float32", "BF16": "bfloat16", "F16": "float16"}
_LITTLE = np.little_endian


class CheckpointError(ValueError):
    """Malformed, missing, or inconsistent checkpoint data."""


class StructureMismatch(CheckpointError):
    """Two checkpoints do not have the same tensor names and shapes."""


def canonical_dtype(dtype: str) -> str:
    """Accept ``float32``/``f32``/``F32`` style names and return the long form."""
    if dtype in DTYPE_SIZES:
        return dtype
    if dtype in _FROM_TAG:
        return _FROM_TAG[dtype]
    if dtype in _SAFETENSORS_TAGS:
        return _SAFETENSORS_TAGS[dtype]
    raise CheckpointError(f"unknown dtype tag: {dtype!r}")


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    shard_id: int = 0
    byte_offset: int = 0
    byte_length: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dtype", canonical_dtype(self.dtype))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 0 for s in self.shape):
            raise CheckpointError(f"negative extent in shape of {self.name!r}: {self.shape}")
        if self.byte_length is None:
            object.__setattr__(self, "byte_length", self.expected_length)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def expected_length(self) -> int:
        return self.numel * DTYPE_SIZES[self.dtype]


@dataclass(frozen=True)
class CheckpointManifest:
    model_id: str
    tensors: tuple[TensorMeta, ...]
    shard_paths: tuple[str, ...]
    root: Path = field(default=Path("."), compare=False)
    layout: str = "dir"

    def __post_init__(self):
        index = {}
        for meta in self.tensors:
            if meta.name in index:
                raise CheckpointError(f"duplicate name: {meta.name!r}")
            index[meta.name] = meta
        object.__setattr__(self, "_index", index)

    @property
    def total_params(self) -> int:
        return sum(t.numel for t in self.tensors)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def meta(self, name: str) -> TensorMeta:
        try:
            return self._index[name]
        except KeyError:
            raise CheckpointError(f"unknown tensor name: {name!r}") from None

    def shard_file(self, shard_id: int) -> Path:
        return self.root / self.shard_paths[shard_id]

    def largest_tensor_bytes(self, compute: bool = True) -> int:
        """Largest tensor size, in float32 compute bytes by default."""
        if not self.tensors:
            return 0
        if compute:
            return max(t.numel for t in self.tensors) * 4
        return max(t.byte_length for t in self.tensors)

    def to_json_bytes(self) -> bytes:
        doc = {
            "model_id": self.model_id,
            "tensors": [
                {
                    "name": t.name,
                    "dtype": _TO_TAG[t.dtype],
                    "shape": list(t.shape),
                    "shard": t.shard_id,
                    "offset": t.byte_offset,
                    "length": t.byte_length,
                }
                for t in sorted(self.tensors, key=lambda t: t.name)
            ],
            "shards": list(self.shard_paths),
        }
        return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


@dataclass
class DenseTensor:
    meta: TensorMeta
    values: np.ndarray

    def __post_init__(self):
        if self.values.size != self.meta.numel:
            raise CheckpointError(
                f"tensor {self.meta.name!r} holds {self.values.size} values, shape needs {self.meta.numel}"
            )

    @property
    def name(self) -> str:
        return self.meta.name

    @classmethod
    def from_array(cls, name: str, values, dtype: str = "float32") -> DenseTensor:
        arr = np.ascontiguousarray(values, dtype=np.float32)
        return cls(TensorMeta(name, dtype, arr.shape), arr)


# --------------------------------------------------------------------- open


def open_checkpoint(path) -> CheckpointManifest:
    """Open and validate a checkpoint without loading tensor data."""
    path = Path(path)
    if path.is_file() and path.suffix == ".safetensors":
        return _open_safetensors(path)
    if not path.is_dir():
        raise CheckpointError(f"missing manifest: {path} is not a checkpoint directory")
    manifest_file = path / MANIFEST_NAME
    if not manifest_file.is_file():
        candidates = sorted(path.glob("*.safetensors"))
        if len(candidates) == 1:
            return _open_safetensors(candidates[0])
        raise CheckpointError(f"missing manifest: {manifest_file}")
    try:
        doc = json.loads(manifest_file.read_text(encoding="utf-8"))
        shards = tuple(doc["shards"])
        tensors = []
        for entry in doc["tensors"]:
            tag = entry["dtype"]
            if tag not in _FROM_TAG:
                raise CheckpointError(f"unknown dtype tag: {tag!r} on tensor {entry['name']!r}")
            tensors.append(
                TensorMeta(
                    name=entry["name"],
                    dtype=_FROM_TAG[tag],
                    shape=tuple(entry["shape"]),
                    shard_id=int(entry["shard"]),
                    byte_offset=int(entry["offset"]),
                    byte_length=int(entry["length"]),
                )
            )
        model_id = doc["model_id"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed manifest {manifest_file}: {exc}") from exc
    manifest = CheckpointManifest(model_id, tuple(tensors), shards, root=path)
    _validate(manifest)
    return manifest


def _open_safetensors(file: Path) -> CheckpointManifest:
    with open(file, "rb") as f:
        head = f.read(8)
        if len(head) != 8:
            raise CheckpointError(f"shard read failure: truncated safetensors header in {file}")
        (header_len,) = struct.unpack("<Q", head)
        try:
            header = json.loads(f.read(header_len))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"malformed safetensors header in {file}: {exc}") from exc
    metadata = header.pop("__metadata__", None) or {}
    data_start = 8 + header_len
    tensors = []
    for name, entry in header.items():
        tag = entry["dtype"]
        if tag not in _SAFETENSORS_TAGS:
            raise CheckpointError(f"unknown dtype tag: {tag!r} on tensor {name!r}")
        begin, end = entry["data_offsets"]
        tensors.append(
            TensorMeta(name, _SAFETENSORS_TAGS[tag], tuple(entry["shape"]), 0, data_start + begin, end - begin)
        )
    tensors.sort(key=lambda t: t.name)
    model_id = metadata.get("model_id", file.stem)
    manifest = CheckpointManifest(model_id, tuple(tensors), (file.name,), root=file.parent, layout="safetensors")
    _validate(manifest)
    return manifest


def _validate(manifest: CheckpointManifest) -> None:
    by_shard: dict[int, list[TensorMeta]] = {}
    for meta in manifest.tensors:
        if not 0 <= meta.shard_id < len(manifest.shard_paths):
            raise CheckpointError(f"shard path missing: tensor {meta.name!r} references shard {meta.shard_id}")
        if meta.byte_offset < 0 or meta.byte_length < 0:
            raise CheckpointError(f"negative byte range on tensor {meta.name!r}")
        by_shard.setdefault(meta.shard_id, []).append(meta)
    for i in range(len(manifest.shard_paths)):
        if not manifest.shard_file(i).is_file():
            raise CheckpointError(f"shard path missing: {manifest.shard_file(i)}")
    for shard_id, metas in by_shard.items():
        spans = sorted((m.byte_offset, m.byte_offset + m.byte_length, m.name) for m in metas if m.byte_length > 0)
        for (_, end, left), (start, _, right) in zip(spans, spans[1:]):
            if start < end:
                raise CheckpointError(f"overlapping byte ranges in shard {shard_id}: {left!r} and {right!r}")


# --------------------------------------------------------------------- read


def read_tensor(manifest: CheckpointManifest, name: str) -> DenseTensor:
    """Load one tensor as a float32 buffer; the source bytes are not modified."""
    meta = manifest.meta(name)
    if meta.byte_length != meta.expected_length:
        raise CheckpointError(
            f"byte_length mismatch for {name!r}: manifest says {meta.byte_length}, "
            f"{meta.dtype}{list(meta.shape)} needs {meta.expected_length}"
        )
    out = np.empty(meta.numel, dtype=np.float32)
    if meta.numel:
        try:
            with open(manifest.shard_file(meta.shard_id), "rb") as f:
                f.seek(meta.byte_offset)
                _read_into(f, meta.dtype, out)
        except OSError as exc:
            raise CheckpointError(f"shard read failure for {name!r}: {exc}") from exc
    return DenseTensor(meta, out.reshape(meta.shape))


def _read_exact(f, buf: np.ndarray) -> None:
    view = memoryview(buf).cast("B")
    got = 0
    while got < len(view):
        n = f.readinto(view[got:])
        if not n:
            raise CheckpointError(f"shard read failure: wanted {len(view)} bytes, got {got}")
        got += n


def _read_into(f, dtype: str, out: np.ndarray) -> None:
    if dtype == "float32":
        _read_exact(f, out)
        if not _LITTLE:
            out.byteswap(inplace=True)
        return
    scratch = np.empty(min(out.size, IO_CHUNK_ELEMENTS), dtype="<u2")
    as_u32 = out.view(np.uint32)
    for start in range(0, out.size, scratch.size):
        chunk = scratch[: min(scratch.size, out.size - start)]
        _read_exact(f, chunk)
        if dtype == "bfloat16":
            dst = as_u32[start : start + chunk.size]
            dst[...] = chunk
            dst <<= np.uint32(16)
        else:
            out[start : start + chunk.size] = chunk.view("<f2")


def iter_tensors(manifest: CheckpointManifest, names: Iterable[str] | None = None) -> Iterator[DenseTensor]:
    """Yield tensors one at a time in lexicographic name order."""
    for name in sorted(manifest.names if names is None else names):
        yield read_tensor(manifest, name)


# -------------------------------------------------------------------- write


def float32_to_bfloat16_bits(values: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even float32 -> bfloat16, returned as uint16 bit patterns."""
    u = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    rounding = ((u >> np.uint32(16)) & np.uint32(1)) + np.uint32(0x7FFF)
    out = ((u + rounding) >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        out[nan] = ((u[nan] >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
    return out


def _encode_chunks(values: np.ndarray, dtype: str) -> Iterator[memoryview]:
    flat = values.reshape(-1)
    if dtype == "float32":
        yield memoryview(np.ascontiguousarray(flat, dtype="<f4")).cast("B")
        return
    for start in range(0, flat.size, IO_CHUNK_ELEMENTS):
        chunk = flat[start : start + IO_CHUNK_ELEMENTS]
        if dtype == "bfloat16":
            enc = float32_to_bfloat16_bits(chunk).astype("<u2", copy=False)
        else:
            enc = chunk.astype("<f2")
        yield memoryview(enc).cast("B")


class CheckpointWriter:
    """Append tensors one at a time into greedily packed shards.

    A new shard is opened whenever the next tensor would push the current one
    past ``max_shard_bytes``; tensors are never split.
    """

    def __init__(
        self,
        path,
        *,
        model_id: str | None = None,
        output_dtype: str | None = None,
        max_shard_bytes: int = DEFAULT_MAX_SHARD_BYTES,
    ):
        self.path = Path(path)
        self.model_id = model_id if model_id is not None else self.path.name
        self.output_dtype = canonical_dtype(output_dtype) if output_dtype else None
        self.max_shard_bytes = int(max_shard_bytes)
        self._metas: list[TensorMeta] = []
        self._names: set[str] = set()
        self._shards: list[str] = []
        self._fh = None
        self._cursor = 0
        self.path.mkdir(parents=True, exist_ok=True)
        # stale shards from an earlier write would otherwise survive next to the new manifest
        for old in self.path.glob("shard-*.bin"):
            old.unlink()
        stale_manifest = self.path / MANIFEST_NAME
        if stale_manifest.exists():
            stale_manifest.unlink()

    def add(self, tensor: DenseTensor) -> TensorMeta:
        name = tensor.meta.name
        if name in self._names:
            raise CheckpointError(f"duplicate name: {name!r}")
        dtype = self.output_dtype or tensor.meta.dtype
        length = tensor.meta.numel * DTYPE_SIZES[dtype]
        if length > self.max_shard_bytes:
            raise CheckpointError(
                f"shard budget smaller than a single tensor: {name!r} needs {length} bytes, "
                f"max_shard_bytes={self.max_shard_bytes}"
            )
        if self._fh is None or (self._cursor > 0 and self._cursor + length > self.max_shard_bytes):
            self._open_shard()
        offset = self._cursor
        for buf in _encode_chunks(tensor.values, dtype):
            self._fh.write(buf)
        self._cursor += length
        meta = TensorMeta(name, dtype, tensor.meta.shape, len(self._shards) - 1, offset, length)
        self._metas.append(meta)
        self._names.add(name)
        return meta

    def _open_shard(self) -> None:
        if self._fh is not None:
            self._fh.close()
        shard = f"shard-{len(self._shards):05d}.bin"
        self._fh = open(self.path / shard, "wb")
        self._shards.append(shard)
        self._cursor = 0

    def close(self) -> CheckpointManifest:
        if self._fh is None:
            self._open_shard()
        self._fh.close()
        self._fh = None
        manifest = CheckpointManifest(
            self.model_id, tuple(sorted(self._metas, key=lambda m: m.name)), tuple(self._shards), root=self.path
        )
        (self.path / MANIFEST_NAME).write_bytes(manifest.to_json_bytes())
        return manifest

    def abort(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> CheckpointWriter:
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.abort()
        elif self._fh is not None or not (self.path / MANIFEST_NAME).exists():
            self.close()


def write_checkpoint(
    tensors: Iterable[DenseTensor],
    output_dtype: str | None,
    path,
    max_shard_bytes: int = DEFAULT_MAX_SHARD_BYTES,
    model_id: str | None = None,
) -> CheckpointManifest:
    """Drain a tensor stream into a new checkpoint.

    ``output_dtype=None`` keeps each tensor's own dtype.  Only one tensor of
    the stream is referenced at a time.
    """
    writer = CheckpointWriter(path, model_id=model_id, output_dtype=output_dtype, max_shard_bytes=max_shard_bytes)
    stream = iter(tensors)
    try:
        while True:
            tensor = next(stream, None)
            if tensor is None:
                break
            writer.add(tensor)
            tensor = None  # release before pulling the next one
    except BaseException:
        writer.abort()
        raise
    return writer.close()


def rewrite_manifest(manifest: CheckpointManifest, path=None) -> None:
    """Serialize ``manifest`` to ``path`` (defaults to its own directory)."""
    target = Path(path) if path is not None else manifest.root / MANIFEST_NAME
    target.write_bytes(manifest.to_json_bytes())


def with_meta(manifest: CheckpointManifest, name: str, **changes) -> CheckpointManifest:
    """Copy of ``manifest`` with one TensorMeta's fields replaced."""
    tensors = tuple(replace(t, **changes) if t.name == name else t for t in manifest.tensors)
    return replace(manifest, tensors=tensors)


def checkpoint_digest(manifest: CheckpointManifest) -> str:
    """SHA-256 over the manifest bytes followed by every shard's bytes."""
    h = hashlib.sha256()
    if manifest.layout == "dir":
        h.update(manifest.to_json_bytes())
    for i in range(len(manifest.shard_paths)):
        with open(manifest.shard_file(i), "rb") as f:
            for block in iter(lambda: f.read(1 << 22), b""):
                h.update(block)
    return h.hexdigest()


def check_aligned(reference: CheckpointManifest, others: Iterable[CheckpointManifest]) -> None:
    """Raise StructureMismatch unless every checkpoint has the same names and shapes."""
    ref = {t.name: t.shape for t in reference.tensors}
    for other in others:
        got = {t.name: t.shape for t in other.tensors}
        if got.keys() != ref.keys():
            missing = sorted(ref.keys() - got.keys())
            extra = sorted(got.keys() - ref.keys())
            raise StructureMismatch(
                f"structure mismatch between {reference.model_id!r} and {other.model_id!r}: "
                f"missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for name, shape in ref.items():
            if got[name] != shape:
                raise StructureMismatch(
                    f"structure mismatch on {name!r}: {reference.model_id!r} has {shape}, "
                    f"{other.model_id!r} has {got[name]}"
                )
