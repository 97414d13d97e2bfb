"""Streaming accumulation of chunk aggregates into per-layer profiles.

Point estimates always come from pooled counts; the per-chunk metric
snapshots exist only to supply standard-deviation bands (the pooled entropy
of summed counts is not the mean of per-chunk entropies, and the two are
reported side by side).

Accumulators are single-writer. ``merge`` defines the cross-thread contract:
shard chunks across workers, merge the results. Integer fields merge
exactly in any order; probability sums agree to ~1e-12 relative across
merge orders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import metrics
from .trace import (CHUNK_PROB_MASS_REL_TOL, PROB_BASIS_FULL, ChunkAggregate,
                    LayerLanguageProfile)

SERIES_METRICS = ("usage_entropy", "gini", "active_experts")


class ChunkMetrics(NamedTuple):
    chunk_id: int
    token_count: int
    usage_entropy: float
    gini: float


@dataclass
class LayerLanguageAccumulator:
    """Mutable per-(layer, language) sufficient statistics."""

    layer: int
    language: str
    num_experts: int
    top_k: int
    prob_basis: str = PROB_BASIS_FULL
    token_count: int = 0
    counts: np.ndarray = None
    prob_sums: np.ndarray = None
    per_chunk: list = field(default_factory=list)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.num_experts, dtype=np.int64)
        if self.prob_sums is None:
            self.prob_sums = np.zeros(self.num_experts, dtype=np.float64)

    def chunk_ids(self) -> set:
        return {cm.chunk_id for cm in self.per_chunk}


def accumulate(acc: LayerLanguageAccumulator, chunk: ChunkAggregate) -> LayerLanguageAccumulator:
    """Fold one chunk row into the accumulator (element-wise addition)."""
    if chunk.layer != acc.layer or chunk.language != acc.language:
        raise ValueError(
            f"layer/language mismatch: accumulator is ({acc.layer}, '{acc.language}'), "
            f"chunk is ({chunk.layer}, '{chunk.language}')")
    counts = np.asarray(chunk.selection_counts, dtype=np.int64)
    acc.counts += counts
    acc.prob_sums += np.asarray(chunk.prob_sums, dtype=np.float64)
    acc.token_count += chunk.content_token_count
    if chunk.content_token_count > 0:
        acc.per_chunk.append(ChunkMetrics(
            chunk_id=chunk.chunk_id,
            token_count=chunk.content_token_count,
            usage_entropy=metrics.usage_entropy(counts),
            gini=metrics.gini(counts),
        ))
    return acc


def merge(a: LayerLanguageAccumulator, b: LayerLanguageAccumulator) -> LayerLanguageAccumulator:
    """Combine two accumulators over disjoint chunk sets."""
    if a.layer != b.layer or a.language != b.language:
        raise ValueError("cannot merge accumulators for different layers or languages")
    overlap = a.chunk_ids() & b.chunk_ids()
    if overlap:
        raise ValueError(f"overlapping chunk ids in merge: {sorted(overlap)[:5]}")
    out = LayerLanguageAccumulator(
        layer=a.layer, language=a.language,
        num_experts=a.num_experts, top_k=a.top_k, prob_basis=a.prob_basis)
    out.counts = a.counts + b.counts
    out.prob_sums = a.prob_sums + b.prob_sums
    out.token_count = a.token_count + b.token_count
    out.per_chunk = list(a.per_chunk) + list(b.per_chunk)
    return out


def finalize(acc: LayerLanguageAccumulator) -> LayerLanguageProfile:
    """Normalize an accumulator into an immutable profile.

    A zero-token accumulator finalizes to an ``empty`` profile, which report
    assembly excludes. Non-empty profiles are checked for selection
    conservation and (full-probability basis) softmax mass.
    """
    t = acc.token_count
    n = acc.num_experts
    if t == 0:
        return LayerLanguageProfile(
            layer=acc.layer, language=acc.language, token_count=0,
            counts=acc.counts.copy(), activation_rate=np.zeros(n),
            mean_prob=np.zeros(n), per_chunk_metrics=(), prob_basis=acc.prob_basis)
    total = int(acc.counts.sum())
    if total != acc.top_k * t:
        raise ValueError(
            f"selection conservation violated at layer {acc.layer} '{acc.language}': "
            f"sum(counts)={total}, expected {acc.top_k * t}")
    mean_prob = acc.prob_sums / t
    if acc.prob_basis == PROB_BASIS_FULL:
        mass = math.fsum(mean_prob)
        if abs(mass - 1.0) > CHUNK_PROB_MASS_REL_TOL:
            raise ValueError(
                f"mean_prob mass out of tolerance at layer {acc.layer} "
                f"'{acc.language}': {mass:.6f}")
    per_chunk = tuple(sorted(acc.per_chunk, key=lambda cm: cm.chunk_id))
    return LayerLanguageProfile(
        layer=acc.layer, language=acc.language, token_count=t,
        counts=acc.counts.copy(), activation_rate=acc.counts / t,
        mean_prob=mean_prob, per_chunk_metrics=per_chunk, prob_basis=acc.prob_basis)


def build_profiles(chunks: Sequence[ChunkAggregate], num_experts: int, top_k: int,
                   prob_basis: str = PROB_BASIS_FULL) -> dict:
    """Accumulate chunk rows into ``{(layer, language): profile}``."""
    accs: dict[tuple[int, str], LayerLanguageAccumulator] = {}
    for chunk in chunks:
        key = (chunk.layer, chunk.language)
        acc = accs.get(key)
        if acc is None:
            acc = LayerLanguageAccumulator(
                layer=chunk.layer, language=chunk.language,
                num_experts=num_experts, top_k=top_k, prob_basis=prob_basis)
            accs[key] = acc
        accumulate(acc, chunk)
    return {key: finalize(acc) for key, acc in sorted(accs.items())}


@dataclass(frozen=True)
class MetricSeries:
    """Layer-indexed series for one metric and one language.

    ``pooled`` holds the point estimate from summed counts; ``chunk_mean``
    and ``chunk_sd`` describe the per-chunk metric values (sample SD, absent
    with fewer than 2 chunks).
    """

    metric: str
    language: str
    layers: tuple[int, ...]
    pooled: tuple[float, ...]
    chunk_mean: tuple[Optional[float], ...]
    chunk_sd: tuple[Optional[float], ...]
    n_chunks: tuple[int, ...]


def _pooled_value(profile: LayerLanguageProfile, metric: str, min_share: float) -> float:
    if metric == "usage_entropy":
        return metrics.usage_entropy(profile.counts)
    if metric == "gini":
        return metrics.gini(profile.counts)
    if metric == "active_experts":
        return float(metrics.active_expert_count(profile.counts, min_share))
    raise ValueError(f"unknown metric '{metric}'; expected one of {SERIES_METRICS}")


def metric_series(profiles: Sequence[LayerLanguageProfile], metric: str,
                  min_share: float = 0.0) -> MetricSeries:
    """Per-layer series for one language, with chunk mean/SD bands."""
    profiles = sorted((p for p in profiles if not p.empty), key=lambda p: p.layer)
    if not profiles:
        raise ValueError("no non-empty profiles to build a series from")
    languages = {p.language for p in profiles}
    if len(languages) != 1:
        raise ValueError(f"profiles span multiple languages: {sorted(languages)}")
    layers, pooled, c_mean, c_sd, n_chunks = [], [], [], [], []
    for p in profiles:
        layers.append(p.layer)
        pooled.append(_pooled_value(p, metric, min_share))
        if metric in ("usage_entropy", "gini") and p.per_chunk_metrics:
            vals = np.array([getattr(cm, metric) for cm in p.per_chunk_metrics])
            c_mean.append(float(vals.mean()))
            c_sd.append(float(vals.std(ddof=1)) if vals.size >= 2 else None)
            n_chunks.append(int(vals.size))
        else:
            c_mean.append(None)
            c_sd.append(None)
            n_chunks.append(len(p.per_chunk_metrics))
    return MetricSeries(metric=metric, language=profiles[0].language,
                        layers=tuple(layers), pooled=tuple(pooled),
                        chunk_mean=tuple(c_mean), chunk_sd=tuple(c_sd),
                        n_chunks=tuple(n_chunks))


@dataclass(frozen=True)
class GapSeries:
    """Per-layer (reference - target) differences for one metric.

    Negative values indicate a higher target-language value.
    """

    metric: str
    ref_language: str
    target_language: str
    layers: tuple[int, ...]
    ref_values: tuple[float, ...]
    target_values: tuple[float, ...]
    gaps: tuple[float, ...]


def gap_series(ref_series: MetricSeries, target_series: MetricSeries) -> GapSeries:
    if ref_series.metric != target_series.metric:
        raise ValueError(f"metric mismatch: '{ref_series.metric}' vs '{target_series.metric}'")
    if ref_series.layers != target_series.layers:
        raise ValueError("layer mismatch between reference and target series")
    gaps = tuple(r - t for r, t in zip(ref_series.pooled, target_series.pooled))
    return GapSeries(metric=ref_series.metric,
                     ref_language=ref_series.language,
                     target_language=target_series.language,
                     layers=ref_series.layers,
                     ref_values=ref_series.pooled,
                     target_values=target_series.pooled,
                     gaps=gaps)
