"""Pure metric kernels over expert-utilization vectors.

Conventions: log base 2 everywhere, 0*log(0) := 0, and entropy/Gini sums use
compensated summation (``math.fsum``) so results stay stable at N=128.
Inputs are plain array-likes: count vectors are non-negative integers per
expert; utilization vectors are any non-negative reals (counts, activation
rates, or mean routing probabilities).
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .trace import topk_of_probs

PROB_ROW_MASS_TOL = 1e-4


def _as_vector(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(v < 0):
        raise ValueError(f"{name} contains negative values")
    return v


def usage_entropy(counts) -> float:
    """Shannon entropy (bits) of the aggregate assignment distribution.

    H = -sum p_i log2 p_i with p_i = c_i / sum(c); range [0, log2 N].
    """
    c = _as_vector(counts, "counts")
    total = c.sum()
    if total == 0:
        raise ValueError("no routed tokens: count vector is all zero")
    p = c[c > 0] / total
    return float(-math.fsum(p * np.log2(p))) + 0.0


def gini(counts) -> float:
    """Gini coefficient of per-expert load; 0 = perfect equality.

    Sorted ascending, G = sum((2i - N - 1) c_i) / (N sum(c)), i in 1..N.
    Integer inputs use exact integer arithmetic for the numerator.
    """
    arr = np.asarray(counts)
    c = _as_vector(arr, "counts")
    n = c.size
    total = c.sum()
    if total == 0:
        raise ValueError("no routed tokens: count vector is all zero")
    weights = 2 * np.arange(1, n + 1) - n - 1
    if np.issubdtype(arr.dtype, np.integer):
        cs = np.sort(arr.astype(np.int64))
        num = int((weights * cs).sum())
        return num / (n * int(total))
    cs = np.sort(c)
    num = math.fsum(weights * cs)
    return float(num / (n * total))


def lsi(a_target: float, a_ref: float) -> float:
    """Language specificity index: (a_t - a_r) / (a_t + a_r) in [-1, 1].

    Positive values mean target-language specialization.
    """
    if a_target < 0 or a_ref < 0:
        raise ValueError("activation scores must be non-negative")
    denom = a_target + a_ref
    if denom == 0:
        raise ValueError("undefined LSI: zero activation in both languages (unused expert)")
    return (a_target - a_ref) / denom


def cosine_similarity(u, v) -> float:
    """Cosine similarity of two non-negative utilization vectors, in [0, 1]."""
    uu = _as_vector(u, "u")
    vv = _as_vector(v, "v")
    if uu.size != vv.size:
        raise ValueError("utilization vectors must have equal length")
    nu = float(np.dot(uu, uu))
    nv = float(np.dot(vv, vv))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("empty utilization: zero vector")
    sim = float(np.dot(uu, vv)) / math.sqrt(nu * nv)
    return min(1.0, max(0.0, sim))


def active_expert_count(counts, min_share: float = 0.0) -> int:
    """Number of experts whose load share strictly exceeds ``min_share``."""
    c = _as_vector(counts, "counts")
    total = c.sum()
    if total == 0:
        raise ValueError("no routed tokens: count vector is all zero")
    if not (0.0 <= min_share < 1.0):
        raise ValueError("min_share must be in [0, 1)")
    return int(np.count_nonzero(c / total > min_share))


def _row_entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-math.fsum(nz * np.log2(nz))) + 0.0


def selection_entropy(prob_rows: Iterable) -> float:
    """Mean per-token entropy (bits) of the router distribution.

    Distinct from :func:`usage_entropy`: this averages the entropy of each
    token's own probability vector rather than measuring the aggregate
    assignment distribution.
    """
    entropies = []
    for i, row in enumerate(prob_rows, start=1):
        p = _as_vector(row, f"probability row {i}")
        mass = math.fsum(p)
        if abs(mass - 1.0) > PROB_ROW_MASS_TOL:
            raise ValueError(f"probability row {i} mass out of tolerance: sums to {mass:.6f}")
        entropies.append(_row_entropy(p))
    if not entropies:
        raise ValueError("empty stream of probability rows")
    return math.fsum(entropies) / len(entropies)


def topk_overlap(profile_a, profile_b, k: int) -> float:
    """|top-k(a) intersect top-k(b)| / k, ties broken to the lower expert id."""
    a = _as_vector(profile_a, "profile_a")
    b = _as_vector(profile_b, "profile_b")
    if a.size != b.size:
        raise ValueError("profiles must have equal length")
    if not (1 <= k <= a.size):
        raise ValueError(f"k must be in [1, {a.size}]")
    ta = set(int(i) for i in topk_of_probs(a, k))
    tb = set(int(i) for i in topk_of_probs(b, k))
    return len(ta & tb) / k


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    boundary = np.r_[True, xs[1:] != xs[:-1]]
    group = np.cumsum(boundary) - 1
    sizes = np.bincount(group)
    ends = np.cumsum(sizes)
    starts = ends - sizes
    avg = (starts + ends + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = avg[group]
    return ranks


def spearman_rho(u, v) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns NaN when either vector is constant (undefined).
    """
    uu = _as_vector(u, "u")
    vv = _as_vector(v, "v")
    if uu.size != vv.size or uu.size < 2:
        raise ValueError("vectors must share a length of at least 2")
    ru = _average_ranks(uu)
    rv = _average_ranks(vv)
    du = ru - ru.mean()
    dv = rv - rv.mean()
    denom = math.sqrt(float(np.dot(du, du)) * float(np.dot(dv, dv)))
    if denom == 0.0:
        return float("nan")
    return float(np.dot(du, dv)) / denom


def kendall_tau(u, v) -> float:
    """Kendall's tau-b (tie-corrected) via exact pair counting.

    Returns NaN when either vector is constant (undefined).
    """
    uu = _as_vector(u, "u")
    vv = _as_vector(v, "v")
    if uu.size != vv.size or uu.size < 2:
        raise ValueError("vectors must share a length of at least 2")
    n = uu.size
    iu, ju = np.triu_indices(n, k=1)
    su = np.sign(uu[ju] - uu[iu]).astype(np.int64)
    sv = np.sign(vv[ju] - vv[iu]).astype(np.int64)
    prod = su * sv
    concordant = int(np.count_nonzero(prod > 0))
    discordant = int(np.count_nonzero(prod < 0))
    ties_u = int(np.count_nonzero(su == 0))
    ties_v = int(np.count_nonzero(sv == 0))
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_u) * (n0 - ties_v))
    if denom == 0.0:
        return float("nan")
    return (concordant - discordant) / denom
