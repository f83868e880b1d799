"""Pure-numpy merge kernels.

Fallback backend used when the compiled extension is unavailable (or when
OBMERGE_PURE_PYTHON is set). Every function here is bit-compatible with
its counterpart in ``_kernels``: same float32 operation order, same tie
handling, same PRNG stream. The parity suite asserts exact equality.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_U53_SCALE = 1.0 / 9007199254740992.0  # 2**-53, exact


def _mix64(state: np.ndarray) -> np.ndarray:
    z = state.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX_A
    z ^= z >> np.uint64(27)
    z *= _MIX_B
    z ^= z >> np.uint64(31)
    return z


def dare_keep_mask(stream_seed: int, n: int, p: float) -> np.ndarray:
    """Boolean keep mask for n entries drawn from one SplitMix64 stream.

    Entry i is kept iff (u_i >> 11) * 2**-53 < p where u_i is the
    (i+1)-th draw of the stream seeded with ``stream_seed``.
    """
    steps = np.arange(1, n + 1, dtype=np.uint64)
    state = np.uint64(stream_seed) + steps * _GOLDEN
    u = _mix64(state) >> np.uint64(11)
    return (u.astype(np.float64) * _U53_SCALE) < p


def rank_topk_mask(primary: np.ndarray, secondary: np.ndarray | None, k: int) -> np.ndarray:
    """Mask of the k highest-ranked entries.

    Ranking: primary descending, then secondary descending, then lower
    flat index first. ``secondary=None`` skips the middle criterion.
    """
    n = primary.size
    mask = np.zeros(n, dtype=bool)
    if k <= 0 or n == 0:
        return mask
    if secondary is None:
        order = np.lexsort((-primary,))
    else:
        order = np.lexsort((-secondary, -primary))
    mask[order[: min(k, n)]] = True
    return mask


def score_grid(h: np.ndarray | np.float32, delta: np.ndarray) -> np.ndarray:
    """Curvature-weighted squared deltas: 0.5 * (h * (delta * delta)).

    ``h`` broadcasts along the input-feature (last) axis.
    """
    d2 = delta * delta
    hd2 = h * d2
    return np.float32(0.5) * hd2


def elect_signs_stack(deltas: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-coordinate consensus sign over a (donors, n) stack.

    sigma = sign(sum_d w_d * sign(delta_d)), with weights zeroed where the
    donor entry is zero. Exact cancellation resolves to the sign of the
    unique largest-weight donor, or +1 on ties.
    """
    donors, n = deltas.shape
    sgn = np.sign(deltas)
    eff = np.where(deltas != 0, weights, np.float32(0)).astype(np.float32, copy=False)
    wsum = np.zeros(n, dtype=np.float32)
    for d in range(donors):
        wsum = wsum + eff[d] * sgn[d]
    out = np.sign(wsum).astype(np.int8)
    zero = wsum == 0
    if np.any(zero):
        wmax = eff.max(axis=0)
        first = eff.argmax(axis=0)
        count = (eff == wmax).sum(axis=0)
        candidate = np.take_along_axis(sgn, first[None, :], axis=0)[0]
        resolved = np.where((count == 1) & (candidate != 0), candidate, np.float32(1))
        out = np.where(zero, resolved.astype(np.int8), out)
    return out


def aggregate_stack(
    deltas: np.ndarray, signs: np.ndarray, lambdas: np.ndarray, mean: bool
) -> np.ndarray:
    """Combine donor values that agree with the elected sign.

    Each donor value is scaled by its lambda first; disagreeing and zero
    entries are excluded. ``mean`` selects disjoint mean over plain sum.
    """
    donors, n = deltas.shape
    acc = np.zeros(n, dtype=np.float32)
    count = np.zeros(n, dtype=np.int64)
    for d in range(donors):
        agree = np.sign(deltas[d]) == signs
        term = np.where(agree, np.float32(lambdas[d]) * deltas[d], np.float32(0))
        acc = acc + term
        count = count + agree
    if mean:
        return acc / np.maximum(count, 1).astype(np.float32)
    return acc
