"""The four merging algorithms over task vectors.

* task arithmetic: lambda-weighted linear sum of deltas
* TIES: magnitude trimming, majority sign election, disjoint mean
* DARE: seeded drop-and-rescale sparsification composed with a linear sum
* OBM: saliency-driven trimming and saliency-weighted sign consensus

Every stage is a pure function of its inputs; donor maps are processed in
sorted-id order and per-tensor work is order-independent, so repeated
runs (at any thread count) are bit-identical.
"""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Callable, ContextManager, Mapping, Sequence

import numpy as np

from . import kernels
from ._util import dare_stream_seed, parallel_map
from .errors import FingerprintMismatch, MergeError, ShapeMismatch, ValidationError
from .saliency import ActivationStats, SaliencyMap, UNIFORM, default_layer_map, score
from .task_vectors import TaskVector

METHODS = ("ta", "ties", "dare", "obm")
SCOPES = ("per_tensor", "global")
AGGREGATIONS = ("disjoint_mean", "sum")

# Out-of-the-box densities: 0.7 for the trimming methods, 0.9 for DARE.
DEFAULT_DENSITY = {"ties": 0.7, "obm": 0.7, "dare": 0.9}
# Task arithmetic with exactly two donors defaults to (0.7, 0.3).
TA_PAIR_LAMBDAS = (0.7, 0.3)


@dataclass(frozen=True)
class MergePolicy:
    """Knobs shared by the sparsifying pipelines.

    Ties in any ranking break toward the lower flat index after the
    descending score chain; this is fixed, not configurable.
    """

    method: str = "obm"
    lambdas: Mapping[str, float] | None = None
    density: float = 0.7
    scope: str = "per_tensor"
    seed: int = 0
    aggregation: str = "disjoint_mean"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValidationError(f"unknown merge method '{self.method}'")
        _check_density(self.density)
        if self.scope not in SCOPES:
            raise ValidationError(f"unknown scope '{self.scope}'")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation '{self.aggregation}'")


def _check_density(p: float) -> None:
    if not (0.0 < p <= 1.0):
        raise ValidationError(f"density must be in (0, 1], got {p}")


def _top_count(p: float, n: int) -> int:
    return min(n, int(math.ceil(p * n)))


def _common_fingerprint(deltas: Mapping[str, TaskVector]) -> str:
    if not deltas:
        raise MergeError("no donor task vectors supplied")
    fingerprints = {tv.base_fingerprint for tv in deltas.values()}
    if len(fingerprints) != 1:
        raise FingerprintMismatch("donor task vectors were computed against different bases")
    return next(iter(fingerprints))


def merge_ta(deltas: Mapping[str, TaskVector], lambdas: Mapping[str, float]) -> TaskVector:
    """Linear summation: combined[k] = sum_d lambda_d * delta_d[k].

    Donors are accumulated in sorted-id order in float32; keys missing
    from a donor contribute nothing.
    """
    fingerprint = _common_fingerprint(deltas)
    for donor_id in deltas:
        if donor_id not in lambdas:
            raise MergeError(f"missing lambda for donor '{donor_id}'")
    names = sorted({n for tv in deltas.values() for n in tv.names()})
    combined: dict[str, np.ndarray] = {}
    for name in names:
        acc: np.ndarray | None = None
        for donor_id in sorted(deltas):
            tv = deltas[donor_id]
            if name not in tv:
                continue
            term = np.float32(lambdas[donor_id]) * tv[name]
            if acc is None:
                acc = np.zeros_like(term)
            elif acc.shape != term.shape:
                raise ShapeMismatch(
                    f"shape mismatch for key '{name}': {acc.shape} vs {term.shape}"
                )
            acc = acc + term
        assert acc is not None
        combined[name] = acc
    return TaskVector(fingerprint, combined)


def _masked(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask.reshape(values.shape), values, np.float32(0))


def trim_magnitude(
    delta: TaskVector, p: float, scope: str = "per_tensor", threads: int = 1
) -> TaskVector:
    """Keep the ceil(p*n) largest-magnitude entries per scope unit.

    Ties resolve to the lower flat index; under global scope the flat
    index runs over tensors in name order.
    """
    _check_density(p)
    names = delta.names()
    if scope == "global":
        flats = [np.abs(delta[n]).ravel() for n in names]
        pooled = np.concatenate(flats) if flats else np.zeros(0, np.float32)
        mask = kernels.rank_topk_mask(pooled, None, _top_count(p, pooled.size))
        out = {}
        offset = 0
        for name, flat in zip(names, flats):
            out[name] = _masked(delta[name], mask[offset : offset + flat.size])
            offset += flat.size
        return TaskVector(delta.base_fingerprint, out, delta.skipped)

    def one(name: str) -> tuple[str, np.ndarray]:
        values = delta[name]
        magnitude = np.abs(values).ravel()
        mask = kernels.rank_topk_mask(magnitude, None, _top_count(p, magnitude.size))
        return name, _masked(values, mask)

    return TaskVector(
        delta.base_fingerprint, dict(parallel_map(one, names, threads)), delta.skipped
    )


def trim_saliency(
    delta: TaskVector,
    sal: SaliencyMap,
    p: float,
    scope: str = "per_tensor",
    threads: int = 1,
) -> TaskVector:
    """Keep the ceil(p*n) highest-saliency entries per scope unit.

    Ranking is saliency first, magnitude second, lower flat index last;
    the magnitude tie-break is what gives uniform-saliency tensors their
    magnitude fallback. Under global scope only activation-mode tensors
    share one pool; uniform-mode tensors keep per-tensor units so their
    density stays consistent.
    """
    _check_density(p)
    names = delta.names()
    for name in names:
        if name not in sal.scores:
            raise MergeError(f"missing saliency for tensor '{name}'")
        if sal[name].shape != delta[name].shape:
            raise ShapeMismatch(
                f"saliency shape {sal[name].shape} does not match delta "
                f"shape {delta[name].shape} for tensor '{name}'"
            )

    def one(name: str) -> tuple[str, np.ndarray]:
        values = delta[name]
        flat = values.ravel()
        mask = kernels.rank_topk_mask(
            sal[name].ravel(), np.abs(flat), _top_count(p, flat.size)
        )
        return name, _masked(values, mask)

    if scope == "global":
        pooled_names = [n for n in names if sal.mode(n) != UNIFORM]
        flats = [delta[n].ravel() for n in pooled_names]
        pooled_scores = (
            np.concatenate([sal[n].ravel() for n in pooled_names])
            if pooled_names
            else np.zeros(0, np.float32)
        )
        pooled_mag = (
            np.concatenate([np.abs(f) for f in flats])
            if pooled_names
            else np.zeros(0, np.float32)
        )
        mask = kernels.rank_topk_mask(pooled_scores, pooled_mag, _top_count(p, pooled_scores.size))
        out = {}
        offset = 0
        for name, flat in zip(pooled_names, flats):
            out[name] = _masked(delta[name], mask[offset : offset + flat.size])
            offset += flat.size
        for name in names:
            if name not in out:
                out[name] = one(name)[1]
        return TaskVector(delta.base_fingerprint, out, delta.skipped)

    return TaskVector(
        delta.base_fingerprint, dict(parallel_map(one, names, threads)), delta.skipped
    )


def dare_sparsify(delta: TaskVector, p: float, seed: int, threads: int = 1) -> TaskVector:
    """Drop-and-rescale: keep entries with probability p, scale by 1/p.

    Each tensor draws from its own SplitMix64 stream seeded from
    (tensor name, seed), in flat row-major order, so results do not
    depend on execution order. p = 1 is the identity.
    """
    _check_density(p)

    def one(name: str) -> tuple[str, np.ndarray]:
        values = delta[name]
        flat = values.ravel()
        mask = kernels.dare_keep_mask(dare_stream_seed(name, seed), flat.size, p)
        kept = np.where(mask, flat / np.float32(p), np.float32(0))
        return name, kept.reshape(values.shape)

    return TaskVector(
        delta.base_fingerprint, dict(parallel_map(one, delta.names(), threads)), delta.skipped
    )


def _stack_for(
    name: str, donor_ids: Sequence[str], trimmed: Mapping[str, TaskVector]
) -> tuple[np.ndarray, tuple[int, ...]]:
    shape: tuple[int, ...] | None = None
    for donor_id in donor_ids:
        if name in trimmed[donor_id]:
            current = tuple(trimmed[donor_id][name].shape)
            if shape is None:
                shape = current
            elif shape != current:
                raise ShapeMismatch(
                    f"shape mismatch for key '{name}': {shape} vs {current}"
                )
    assert shape is not None
    size = int(np.prod(shape, dtype=np.int64)) if shape else 1
    stack = np.zeros((len(donor_ids), size), dtype=np.float32)
    for row, donor_id in enumerate(donor_ids):
        if name in trimmed[donor_id]:
            stack[row] = trimmed[donor_id][name].ravel()
    return stack, shape


def elect_signs(
    trimmed: Mapping[str, TaskVector],
    weights: str = "magnitude",
    sal: Mapping[str, SaliencyMap] | None = None,
) -> dict[str, np.ndarray]:
    """Per-coordinate consensus sign, weighted by magnitude or saliency.

    Zero entries contribute nothing. Exact cancellation resolves to the
    sign of the unique largest-weight contributor, or + on ties.
    """
    if weights not in ("magnitude", "saliency"):
        raise ValidationError(f"unknown sign-election weighting '{weights}'")
    if weights == "saliency" and sal is None:
        raise MergeError("saliency-weighted election requires saliency maps")
    donor_ids = sorted(trimmed)
    names = sorted({n for tv in trimmed.values() for n in tv.names()})
    signs: dict[str, np.ndarray] = {}
    for name in names:
        stack, shape = _stack_for(name, donor_ids, trimmed)
        if weights == "magnitude":
            weight_stack = np.abs(stack)
        else:
            assert sal is not None
            weight_stack = np.zeros_like(stack)
            for row, donor_id in enumerate(donor_ids):
                if name in trimmed[donor_id]:
                    if name not in sal[donor_id].scores:
                        raise MergeError(
                            f"missing saliency for tensor '{name}' of donor '{donor_id}'"
                        )
                    weight_stack[row] = sal[donor_id][name].ravel()
        signs[name] = kernels.elect_signs_stack(stack, weight_stack).reshape(shape)
    return signs


def aggregate(
    trimmed: Mapping[str, TaskVector],
    signs: Mapping[str, np.ndarray],
    lambdas: Mapping[str, float] | None = None,
    aggregation: str = "disjoint_mean",
) -> TaskVector:
    """Combine donor values that agree with the elected sign.

    Values are scaled by their donor's lambda first; disagreeing and zero
    values are excluded. disjoint_mean averages the agreeing values, sum
    adds them.
    """
    if aggregation not in AGGREGATIONS:
        raise ValidationError(f"unknown aggregation '{aggregation}'")
    fingerprint = _common_fingerprint(trimmed)
    donor_ids = sorted(trimmed)
    lam = np.asarray(
        [1.0 if lambdas is None else lambdas.get(d, 1.0) for d in donor_ids],
        dtype=np.float32,
    )
    combined: dict[str, np.ndarray] = {}
    for name in sorted({n for tv in trimmed.values() for n in tv.names()}):
        stack, shape = _stack_for(name, donor_ids, trimmed)
        if name not in signs:
            raise MergeError(f"missing elected signs for tensor '{name}'")
        sign_flat = np.asarray(signs[name], dtype=np.int8).ravel()
        if sign_flat.size != stack.shape[1]:
            raise ShapeMismatch(
                f"sign map size {sign_flat.size} does not match tensor '{name}' size {stack.shape[1]}"
            )
        merged = kernels.aggregate_stack(stack, sign_flat, lam, aggregation == "disjoint_mean")
        combined[name] = merged.reshape(shape)
    return TaskVector(fingerprint, combined)


Timer = Callable[[str], ContextManager]


def _no_timer(_name: str) -> ContextManager:
    return nullcontext()


def _obm_pipeline(
    deltas: Mapping[str, TaskVector],
    stats: Mapping[str, ActivationStats],
    densities: Mapping[str, float],
    lambdas: Mapping[str, float] | None,
    scope: str,
    aggregation: str,
    layer_maps: Mapping[str, Mapping[str, str]] | None,
    threads: int,
    timer: Timer = _no_timer,
) -> tuple[TaskVector, dict[str, SaliencyMap], dict[str, TaskVector]]:
    _common_fingerprint(deltas)
    normalize = scope == "global"
    donor_ids = sorted(deltas)
    saliencies: dict[str, SaliencyMap] = {}
    trimmed: dict[str, TaskVector] = {}
    with timer("scoring"):
        for donor_id in donor_ids:
            if donor_id not in stats:
                raise MergeError(f"missing activation stats for donor '{donor_id}'")
            delta = deltas[donor_id]
            layer_map = (
                layer_maps[donor_id]
                if layer_maps is not None and donor_id in layer_maps
                else default_layer_map(delta.names(), stats[donor_id])
            )
            saliencies[donor_id] = score(delta, stats[donor_id], layer_map, normalize=normalize)
    with timer("trimming"):
        for donor_id in donor_ids:
            trimmed[donor_id] = trim_saliency(
                deltas[donor_id], saliencies[donor_id], densities[donor_id], scope, threads
            )
    with timer("consensus"):
        signs = elect_signs(trimmed, "saliency", saliencies)
        combined = aggregate(trimmed, signs, lambdas, aggregation)
    return combined, saliencies, trimmed


def merge_obm(
    deltas: Mapping[str, TaskVector],
    stats: Mapping[str, ActivationStats],
    policy: MergePolicy | None = None,
    layer_maps: Mapping[str, Mapping[str, str]] | None = None,
    densities: Mapping[str, float] | None = None,
    threads: int = 1,
) -> TaskVector:
    """Saliency pipeline: score, trim, elect by saliency, aggregate.

    Each donor delta is scored with its own activation stats; global
    scope switches curvature to per-token means so differently sized
    calibration runs stay comparable.
    """
    policy = policy or MergePolicy(method="obm")
    dens = {d: policy.density for d in deltas}
    if densities is not None:
        dens.update(densities)
    combined, _, _ = _obm_pipeline(
        deltas, stats, dens, policy.lambdas, policy.scope, policy.aggregation,
        layer_maps, threads, _no_timer,
    )
    return combined


def combine(
    method: str,
    deltas: Mapping[str, TaskVector],
    *,
    lambdas: Mapping[str, float] | None = None,
    densities: Mapping[str, float] | None = None,
    stats: Mapping[str, ActivationStats] | None = None,
    scope: str = "per_tensor",
    seed: int = 0,
    aggregation: str = "disjoint_mean",
    layer_maps: Mapping[str, Mapping[str, str]] | None = None,
    threads: int = 1,
    timer: Timer = _no_timer,
) -> tuple[TaskVector, dict[str, SaliencyMap] | None, dict[str, TaskVector]]:
    """Run one full combination pipeline.

    Returns the combined task vector along with per-donor saliency maps
    (OBM only) and the per-donor sparsified deltas, for reporting.
    ``timer`` wraps each pipeline phase for wall-clock instrumentation.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown merge method '{method}'")
    donor_ids = sorted(deltas)
    lam = {d: 1.0 for d in donor_ids}
    if lambdas is not None:
        lam.update(lambdas)
    dens = {d: DEFAULT_DENSITY.get(method, 1.0) for d in donor_ids}
    if densities is not None:
        dens.update(densities)

    if method == "ta":
        if lambdas is None:
            raise MergeError("task arithmetic requires explicit lambdas")
        with timer("combine"):
            combined = merge_ta(deltas, lam)
        return combined, None, dict(deltas)

    if method == "dare":
        with timer("trimming"):
            sparsified = {
                d: dare_sparsify(deltas[d], dens[d], seed, threads) for d in donor_ids
            }
        with timer("combine"):
            combined = merge_ta(sparsified, lam)
        return combined, None, sparsified

    if method == "ties":
        with timer("trimming"):
            trimmed = {
                d: trim_magnitude(deltas[d], dens[d], scope, threads) for d in donor_ids
            }
        with timer("consensus"):
            signs = elect_signs(trimmed, "magnitude")
            combined = aggregate(trimmed, signs, lam, aggregation)
        return combined, None, trimmed

    if stats is None:
        raise MergeError("saliency merging requires per-donor activation stats")
    return _obm_pipeline(deltas, stats, dens, lam, scope, aggregation, layer_maps, threads, timer)
