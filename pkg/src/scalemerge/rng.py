"""Counter-based random streams.

Every draw is a pure function of ``(key, counter)``: there is no hidden
state, so results are identical regardless of chunking, tensor processing
order, or thread scheduling.  The mixer is SplitMix64's finalizer applied to
``key + counter * golden``.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from collections.abc import Iterable

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def derive_key(*parts: object) -> int:
    """Hash an arbitrary tuple of labels down to a 64-bit stream key."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def mix64(x: int) -> int:
    """Scalar SplitMix64 finalizer, bit-identical to :func:`bits`."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _M1) & _MASK64
    z = ((z ^ (z >> 27)) * _M2) & _MASK64
    return z ^ (z >> 31)


def bits(key: int, start: int, count: int) -> np.ndarray:
    """64 random bits for each counter in ``[start, start + count)``."""
    z = np.arange(start, start + count, dtype=np.uint64)
    z *= np.uint64(_GOLDEN)
    z += np.uint64(key & _MASK64)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


def uniform(key: int, start: int, count: int) -> np.ndarray:
    """Float64 uniforms in [0, 1) with 53 bits of resolution."""
    return (bits(key, start, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def normal(key: int, start: int, count: int) -> np.ndarray:
    """Standard normals by Box-Muller; element ``i`` consumes counters ``2i`` and ``2i+1``."""
    raw = bits(key, 2 * start, 2 * count) >> np.uint64(11)
    u = raw.astype(np.float64)
    u1 = (u[0::2] + 1.0) * 2.0**-53  # (0, 1], keeps log finite
    u2 = u[1::2] * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def randbelow(key: int, counter: int, n: int) -> int:
    """Uniform integer in ``[0, n)`` by multiply-shift on one 64-bit draw."""
    x = mix64(key + counter * _GOLDEN)
    return (x * n) >> 64


def dare_stream_key(seed: int, tensor_name: str) -> int:
    return derive_key("dare", seed, tensor_name)


def dare_keep_mask(seed: int, tensor_name: str, start: int, count: int, drop_p: float) -> np.ndarray:
    """Keep-mask for flat elements ``[start, start + count)`` of one tensor.

    An element is dropped when its uniform draw falls below ``drop_p``.
    """
    return uniform(dare_stream_key(seed, tensor_name), start, count) >= drop_p


def expert_keys(expert_ids: Iterable[str]) -> list[str]:
    """Stable per-expert labels: the id plus its occurrence number.

    Keying sub-seeds by label instead of list position makes DARE masks
    invariant to expert ordering while still separating duplicate ids.
    """
    seen: Counter[str] = Counter()
    keys = []
    for eid in expert_ids:
        keys.append(f"{eid}#{seen[eid]}")
        seen[eid] += 1
    return keys


def expert_subseed(seed: int, expert_key: str) -> int:
    return derive_key("expert", seed, expert_key)
