"""Independent scalar-loop references for every merge operation.

These implement the algorithm definitions literally, one coordinate at a
time, with explicit float32 rounding after every operation (np.float32
scalar arithmetic). They share no code with the library; the library is
checked against them elementwise-exactly. Conventions mirrored here are
part of the library contract: donors iterate in sorted-id order,
saliency is 0.5 * (h * (d * d)), ranking ties break on magnitude then
lower flat index, and exact sign cancellations resolve to the unique
largest-weight donor (else +).
"""

from __future__ import annotations

import math

import numpy as np

F32 = np.float32

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def mix64(state: int) -> int:
    z = (state + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def dare_mask(name: str, seed: int, n: int, p: float) -> list[bool]:
    stream = mix64(fnv1a64(name) ^ (seed & _MASK))
    out = []
    for i in range(n):
        draw = mix64((stream + i * _GOLDEN) & _MASK)
        out.append((draw >> 11) * 2.0**-53 < p)
    return out


def dare_sparsify(deltas: dict[str, np.ndarray], p: float, seed: int) -> dict[str, np.ndarray]:
    out = {}
    for name, values in deltas.items():
        flat = values.ravel()
        mask = dare_mask(name, seed, flat.size, p)
        kept = np.zeros(flat.size, np.float32)
        for i in range(flat.size):
            if mask[i]:
                kept[i] = F32(flat[i]) / F32(p)
        out[name] = kept.reshape(values.shape)
    return out


def merge_ta(donor_deltas: dict[str, dict[str, np.ndarray]], lambdas: dict[str, float]):
    names = sorted({n for d in donor_deltas.values() for n in d})
    out = {}
    for name in names:
        shape = next(d[name].shape for d in donor_deltas.values() if name in d)
        flat_size = int(np.prod(shape)) if shape else 1
        acc = np.zeros(flat_size, np.float32)
        for i in range(flat_size):
            value = F32(0.0)
            for donor in sorted(donor_deltas):
                if name not in donor_deltas[donor]:
                    continue
                term = F32(lambdas[donor]) * F32(donor_deltas[donor][name].ravel()[i])
                value = value + term
            acc[i] = value
        out[name] = acc.reshape(shape)
    return out


def top_count(p: float, n: int) -> int:
    return min(n, int(math.ceil(p * n)))


def _retained(primary, secondary, k) -> set[int]:
    n = len(primary)
    if secondary is None:
        order = sorted(range(n), key=lambda i: (-primary[i], i))
    else:
        order = sorted(range(n), key=lambda i: (-primary[i], -secondary[i], i))
    return set(order[:k])


def trim_magnitude(deltas: dict[str, np.ndarray], p: float, scope: str = "per_tensor"):
    names = sorted(deltas)
    if scope == "global":
        pooled = []
        for name in names:
            pooled.extend(abs(F32(v)) for v in deltas[name].ravel())
        keep = _retained(pooled, None, top_count(p, len(pooled)))
        out = {}
        offset = 0
        for name in names:
            flat = deltas[name].ravel()
            kept = np.zeros(flat.size, np.float32)
            for i in range(flat.size):
                if offset + i in keep:
                    kept[i] = flat[i]
            out[name] = kept.reshape(deltas[name].shape)
            offset += flat.size
        return out
    out = {}
    for name in names:
        flat = deltas[name].ravel()
        keep = _retained([abs(F32(v)) for v in flat], None, top_count(p, flat.size))
        kept = np.zeros(flat.size, np.float32)
        for i in keep:
            kept[i] = flat[i]
        out[name] = kept.reshape(deltas[name].shape)
    return out


def score(
    deltas: dict[str, np.ndarray],
    sq_sums: dict[str, np.ndarray],
    tokens: dict[str, int],
    layer_map: dict[str, str],
    normalize: bool = False,
):
    """s = 0.5 * (h * (d * d)), h from the layer stats; uniform -> 1."""
    scores = {}
    modes = {}
    for name, values in deltas.items():
        layer = layer_map.get(name, "uniform")
        if layer == "uniform":
            scores[name] = np.ones_like(values, dtype=np.float32)
            modes[name] = "uniform"
            continue
        modes[name] = "activation"
        if values.ndim == 2:
            rows, cols = values.shape
            s = np.zeros((rows, cols), np.float32)
            for j in range(cols):
                sq = sq_sums[layer][j]
                h = F32(2.0 * (sq / tokens[layer])) if normalize else F32(2.0 * sq)
                for r in range(rows):
                    d = F32(values[r, j])
                    s[r, j] = F32(0.5) * (h * (d * d))
            scores[name] = s
        else:
            h = F32(2.0) if normalize else F32(2.0 * tokens[layer])
            s = np.zeros(values.size, np.float32)
            for i in range(values.size):
                d = F32(values.ravel()[i])
                s[i] = F32(0.5) * (h * (d * d))
            scores[name] = s.reshape(values.shape)
    return scores, modes


def trim_saliency(
    deltas: dict[str, np.ndarray],
    scores: dict[str, np.ndarray],
    modes: dict[str, str],
    p: float,
    scope: str = "per_tensor",
):
    names = sorted(deltas)

    def per_tensor(name):
        flat = deltas[name].ravel()
        primary = [F32(v) for v in scores[name].ravel()]
        secondary = [abs(F32(v)) for v in flat]
        keep = _retained(primary, secondary, top_count(p, flat.size))
        kept = np.zeros(flat.size, np.float32)
        for i in keep:
            kept[i] = flat[i]
        return kept.reshape(deltas[name].shape)

    if scope == "global":
        pooled_names = [n for n in names if modes[n] != "uniform"]
        primary, secondary = [], []
        for name in pooled_names:
            primary.extend(F32(v) for v in scores[name].ravel())
            secondary.extend(abs(F32(v)) for v in deltas[name].ravel())
        keep = _retained(primary, secondary, top_count(p, len(primary)))
        out = {}
        offset = 0
        for name in pooled_names:
            flat = deltas[name].ravel()
            kept = np.zeros(flat.size, np.float32)
            for i in range(flat.size):
                if offset + i in keep:
                    kept[i] = flat[i]
            out[name] = kept.reshape(deltas[name].shape)
            offset += flat.size
        for name in names:
            if name not in out:
                out[name] = per_tensor(name)
        return out
    return {name: per_tensor(name) for name in names}


def elect(
    donor_deltas: dict[str, dict[str, np.ndarray]],
    donor_weights: dict[str, dict[str, np.ndarray]],
):
    donors = sorted(donor_deltas)
    names = sorted({n for d in donor_deltas.values() for n in d})
    signs = {}
    for name in names:
        shape = next(d[name].shape for d in donor_deltas.values() if name in d)
        size = int(np.prod(shape)) if shape else 1
        sigma = np.zeros(size, np.int8)
        for i in range(size):
            total = F32(0.0)
            best_weight = None
            best_donor = None
            best_count = 0
            for donor in donors:
                if name in donor_deltas[donor]:
                    v = F32(donor_deltas[donor][name].ravel()[i])
                    w = F32(donor_weights[donor][name].ravel()[i]) if v != 0 else F32(0.0)
                else:
                    v = F32(0.0)
                    w = F32(0.0)
                s = F32(np.sign(v))
                total = total + w * s
                if best_weight is None or w > best_weight:
                    best_weight, best_donor, best_count = w, donor, 1
                elif w == best_weight:
                    best_count += 1
            if total > 0:
                sigma[i] = 1
            elif total < 0:
                sigma[i] = -1
            else:
                if best_count == 1 and name in donor_deltas[best_donor]:
                    cand = np.sign(donor_deltas[best_donor][name].ravel()[i])
                    sigma[i] = int(cand) if cand != 0 else 1
                else:
                    sigma[i] = 1
        signs[name] = sigma.reshape(shape)
    return signs


def aggregate(
    donor_deltas: dict[str, dict[str, np.ndarray]],
    signs: dict[str, np.ndarray],
    lambdas: dict[str, float] | None,
    aggregation: str = "disjoint_mean",
):
    donors = sorted(donor_deltas)
    names = sorted({n for d in donor_deltas.values() for n in d})
    out = {}
    for name in names:
        shape = signs[name].shape
        size = int(np.prod(shape)) if shape else 1
        merged = np.zeros(size, np.float32)
        for i in range(size):
            acc = F32(0.0)
            count = 0
            for donor in donors:
                if name not in donor_deltas[donor]:
                    continue
                v = F32(donor_deltas[donor][name].ravel()[i])
                if np.sign(v) != signs[name].ravel()[i]:
                    continue
                lam = F32(1.0 if lambdas is None else lambdas.get(donor, 1.0))
                acc = acc + lam * v
                count += 1
            if aggregation == "disjoint_mean":
                merged[i] = acc / F32(count if count > 0 else 1)
            else:
                merged[i] = acc
        out[name] = merged.reshape(shape)
    return out


def ties(
    donor_deltas: dict[str, dict[str, np.ndarray]],
    lambdas: dict[str, float] | None,
    p: float,
    scope: str = "per_tensor",
    aggregation: str = "disjoint_mean",
):
    trimmed = {d: trim_magnitude(donor_deltas[d], p, scope) for d in donor_deltas}
    weights = {d: {n: np.abs(v) for n, v in trimmed[d].items()} for d in trimmed}
    signs = elect(trimmed, weights)
    return aggregate(trimmed, signs, lambdas, aggregation)


def obm(
    donor_deltas: dict[str, dict[str, np.ndarray]],
    donor_sq_sums: dict[str, dict[str, np.ndarray]],
    donor_tokens: dict[str, dict[str, int]],
    layer_maps: dict[str, dict[str, str]],
    p: dict[str, float],
    scope: str = "per_tensor",
    aggregation: str = "disjoint_mean",
    lambdas: dict[str, float] | None = None,
):
    saliencies = {}
    trimmed = {}
    for donor in sorted(donor_deltas):
        scores, modes = score(
            donor_deltas[donor],
            donor_sq_sums[donor],
            donor_tokens[donor],
            layer_maps[donor],
            normalize=(scope == "global"),
        )
        saliencies[donor] = scores
        trimmed[donor] = trim_saliency(donor_deltas[donor], scores, modes, p[donor], scope)
    signs = elect(trimmed, saliencies)
    return aggregate(trimmed, signs, lambdas, aggregation)
