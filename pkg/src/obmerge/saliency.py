"""Activation-aware parameter saliency.

Accumulates per-layer input second moments from forward passes, forms the
layer-wise curvature diagonal h_j = 2 * sum_t x_{t,j}^2, and scores each
task-vector entry as s = 0.5 * h * delta^2. Tensors without activation
coverage (embeddings and other non-linear components) get uniform scores
and fall back to magnitude ranking downstream.

Stats files reuse the checkpoint container: one "<layer>.sq_sum" F32
vector per layer, with "token_count.<layer>" and "stats_version" in the
metadata. Stats are persisted so saliency can be cached and reused across
merges, and shards can be combined with ``merge_stats``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .errors import ShapeMismatch, StatsError
from .tensor_store import Checkpoint, Tensor, read_checkpoint, write_checkpoint

UNIFORM = "uniform"

STATS_VERSION = "1"
_SUFFIX = ".sq_sum"


class ActivationStats:
    """Per-layer accumulated input second moments and token counts.

    Accumulation runs in float64 so shard-then-merge matches single-pass
    accumulation to well under 1e-6 relative.
    """

    def __init__(self) -> None:
        self._sq_sum: dict[str, np.ndarray] = {}
        self._tokens: dict[str, int] = {}

    def layers(self) -> tuple[str, ...]:
        return tuple(sorted(self._sq_sum))

    def __contains__(self, layer: str) -> bool:
        return layer in self._sq_sum

    def width(self, layer: str) -> int:
        return int(self._sq_sum[layer].size)

    def sq_sum(self, layer: str) -> np.ndarray:
        return self._sq_sum[layer]

    def token_count(self, layer: str) -> int:
        return self._tokens.get(layer, 0)

    def set_layer(self, layer: str, sq_sum: np.ndarray, token_count: int) -> None:
        values = np.asarray(sq_sum, dtype=np.float64)
        if np.any(values < 0) or token_count < 0:
            raise StatsError(f"negative statistics for layer '{layer}'")
        if token_count == 0 and np.any(values != 0):
            raise StatsError(f"layer '{layer}' has square sums but no tokens")
        self._sq_sum[layer] = values.copy()
        self._tokens[layer] = int(token_count)

    def save(self, path: str | Path, extra_metadata: Mapping[str, str] | None = None) -> None:
        meta = {"stats_version": STATS_VERSION}
        tensors = []
        for layer in self.layers():
            tensors.append(Tensor(layer + _SUFFIX, self._sq_sum[layer].astype(np.float32)))
            meta[f"token_count.{layer}"] = str(self._tokens[layer])
        meta.update(extra_metadata or {})
        write_checkpoint(Checkpoint(tensors, metadata=meta), path)

    @classmethod
    def load(cls, path: str | Path) -> "ActivationStats":
        ckpt = read_checkpoint(path)
        if ckpt.metadata.get("stats_version") != STATS_VERSION:
            raise StatsError(f"'{path}': missing or unsupported stats_version")
        stats = cls()
        for name, tensor in ckpt.items():
            if not name.endswith(_SUFFIX):
                raise StatsError(f"'{path}': unexpected tensor '{name}' in stats file")
            layer = name[: -len(_SUFFIX)]
            tokens = ckpt.metadata.get(f"token_count.{layer}")
            if tokens is None:
                raise StatsError(f"'{path}': missing token_count for layer '{layer}'")
            stats.set_layer(layer, tensor.data.astype(np.float64), int(tokens))
        return stats


def accumulate_stats(stats: ActivationStats, layer: str, batch: np.ndarray) -> ActivationStats:
    """Add one batch of layer inputs (tokens x features) to the stats."""
    matrix = np.asarray(batch, dtype=np.float64)
    if matrix.ndim != 2:
        raise StatsError(f"batch for layer '{layer}' must be 2-D, got shape {matrix.shape}")
    tokens, width = matrix.shape
    if layer in stats:
        if stats.width(layer) != width:
            raise ShapeMismatch(
                f"layer '{layer}' width mismatch: stats have {stats.width(layer)}, batch has {width}"
            )
        stats._sq_sum[layer] += np.sum(matrix * matrix, axis=0)
        stats._tokens[layer] += int(tokens)
    else:
        stats.set_layer(layer, np.sum(matrix * matrix, axis=0), int(tokens))
    return stats


def hessian_diag(stats: ActivationStats, layer: str, normalize: bool = False) -> np.ndarray:
    """Curvature diagonal h_j = 2 * sq_sum_j for one layer, as float64.

    ``normalize`` divides by the token count first, making layers that
    were calibrated with different budgets comparable (used for global
    top-p ranking); per-tensor ranking uses the raw sums.
    """
    if layer not in stats:
        raise StatsError(f"unknown layer '{layer}'")
    tokens = stats.token_count(layer)
    if tokens == 0:
        raise StatsError(f"no calibration coverage for layer '{layer}'")
    sq = stats.sq_sum(layer)
    if normalize:
        return 2.0 * (sq / float(tokens))
    return 2.0 * sq


def bias_hessian(stats: ActivationStats, layer: str, normalize: bool = False) -> float:
    """Curvature for bias entries via the constant-1 augmented input."""
    if layer not in stats:
        raise StatsError(f"unknown layer '{layer}'")
    tokens = stats.token_count(layer)
    if tokens == 0:
        raise StatsError(f"no calibration coverage for layer '{layer}'")
    return 2.0 if normalize else 2.0 * float(tokens)


def merge_stats(a: ActivationStats, b: ActivationStats) -> ActivationStats:
    """Elementwise sum of two stats; commutative and associative."""
    merged = ActivationStats()
    for layer in sorted(set(a.layers()) | set(b.layers())):
        in_a, in_b = layer in a, layer in b
        if in_a and in_b:
            if a.width(layer) != b.width(layer):
                raise ShapeMismatch(
                    f"layer '{layer}' width conflict: {a.width(layer)} vs {b.width(layer)}"
                )
            merged.set_layer(
                layer,
                a.sq_sum(layer) + b.sq_sum(layer),
                a.token_count(layer) + b.token_count(layer),
            )
        else:
            src = a if in_a else b
            merged.set_layer(layer, src.sq_sum(layer), src.token_count(layer))
    return merged


@dataclass
class SaliencyMap:
    """Non-negative per-tensor scores, shape-matched to a task vector."""

    scores: dict[str, np.ndarray]
    modes: dict[str, str]  # per tensor: "activation" or "uniform"

    def names(self) -> tuple[str, ...]:
        return tuple(sorted(self.scores))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.scores[name]

    def mode(self, name: str) -> str:
        return self.modes[name]


def default_layer_map(names: Iterable[str], stats: ActivationStats) -> dict[str, str]:
    """Route "<layer>.weight" / "<layer>.bias" tensors to covered layers.

    Anything whose stem is not in the stats (embeddings, odd extras) maps
    to uniform saliency.
    """
    mapping: dict[str, str] = {}
    for name in names:
        stem = None
        for suffix in (".weight", ".bias"):
            if name.endswith(suffix):
                stem = name[: -len(suffix)]
                break
        mapping[name] = stem if stem is not None and stem in stats else UNIFORM
    return mapping


def score(
    delta,
    stats: ActivationStats,
    layer_map: Mapping[str, str],
    normalize: bool = False,
) -> SaliencyMap:
    """Score every task-vector entry: s = 0.5 * h * delta^2.

    2-D tensors broadcast h along the input-feature (column) axis; 1-D
    tensors mapped to a layer are treated as biases with the constant-1
    input feature. Tensors mapped to ``uniform`` (or absent from the map)
    score 1 everywhere and carry mode "uniform".
    """
    scores: dict[str, np.ndarray] = {}
    modes: dict[str, str] = {}
    for name in delta.names():
        values = delta[name]
        layer = layer_map.get(name, UNIFORM)
        if layer == UNIFORM:
            scores[name] = np.ones_like(values, dtype=np.float32)
            modes[name] = UNIFORM
            continue
        if layer not in stats:
            raise StatsError(f"no stats for layer '{layer}' needed by tensor '{name}'")
        if values.ndim == 2:
            h = hessian_diag(stats, layer, normalize).astype(np.float32)
            if h.size != values.shape[1]:
                raise ShapeMismatch(
                    f"tensor '{name}' input width {values.shape[1]} does not match "
                    f"layer '{layer}' width {h.size}"
                )
            scores[name] = kernels.score_grid(h, values)
        elif values.ndim == 1:
            h_bias = np.float32(bias_hessian(stats, layer, normalize))
            scores[name] = kernels.score_grid(h_bias, values)
        else:
            raise StatsError(
                f"tensor '{name}' has rank {values.ndim}; activation saliency supports 1-D and 2-D"
            )
        modes[name] = "activation"
    return SaliencyMap(scores, modes)
