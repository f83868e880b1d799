"""Shared helpers: hashing, seeded stream derivation, parallel mapping."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

T = TypeVar("T")
R = TypeVar("R")


def fnv1a64(text: str) -> int:
    """FNV-1a over the UTF-8 bytes of ``text``, modulo 2**64."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def splitmix64(state: int) -> int:
    """One SplitMix64 draw from ``state`` (output of the advanced state)."""
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def dare_stream_seed(tensor_name: str, global_seed: int) -> int:
    """Per-tensor PRNG stream seed for drop-and-rescale sparsification.

    Defined as SplitMix64(FNV-1a-64(tensor_name) XOR global_seed) so that
    per-tensor streams are independent of each other and of execution
    order, and reproducible across implementations.
    """
    return splitmix64(fnv1a64(tensor_name) ^ (global_seed & _MASK64))


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Order-preserving map; runs on a thread pool when ``threads > 1``.

    Callers rely on the result order matching ``items`` so that per-tensor
    parallelism never changes assembled outputs.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
