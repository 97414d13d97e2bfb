"""Higher-order routing analyses.

Covers expert categorization by language-specificity (with threshold
sensitivity), deep-layer collapse detection, same-language split controls,
and corpus tokenization statistics. Collapse-detector thresholds are tool
defaults, not measured constants; reports carry that caveat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .aggregate import MetricSeries, build_profiles, gap_series, metric_series
from .trace import PROB_BASIS_FULL, ChunkAggregate, LayerLanguageProfile

DEFAULT_LSI_THRESHOLDS = (0.05, 0.1, 0.15, 0.2)
COLLAPSE_DEFAULTS_NOTE = ("collapse criteria (deep_fraction, min_drop_bits, require_sd) "
                          "are analyzer defaults, not measured constants")

CATEGORY_TARGET = "target_specific"
CATEGORY_REF = "ref_specific"
CATEGORY_SHARED = "shared"
CATEGORY_UNUSED = "unused"

LSI_MODE_MEAN_OF_LSI = "mean_of_layer_lsi"
LSI_MODE_LSI_OF_MEANS = "lsi_of_layer_means"


@dataclass(frozen=True)
class ExpertCategorization:
    """Per-expert language-specificity classification at one threshold."""

    threshold: float
    target_language: str
    ref_language: str
    layers: tuple[int, ...]
    lsi: np.ndarray                 # (N,) layer-averaged, NaN = unused
    lsi_matrix: np.ndarray          # (L, N) per-layer, NaN where undefined
    categories: tuple[str, ...]     # per expert
    counts: dict
    mode: str = LSI_MODE_MEAN_OF_LSI
    prob_basis: str = PROB_BASIS_FULL


def _profile_map(profiles: Sequence[LayerLanguageProfile]) -> dict:
    return {p.layer: p for p in profiles if not p.empty}


def _lsi_surface(profiles_target, profiles_ref, mode: str):
    """Common layers, per-layer LSI matrix, and layer-averaged LSI vector."""
    tmap = _profile_map(profiles_target)
    rmap = _profile_map(profiles_ref)
    layers = sorted(set(tmap) & set(rmap))
    if not layers:
        raise ValueError("no common layers between target and reference profiles")
    n = tmap[layers[0]].mean_prob.size
    matrix = np.full((len(layers), n), np.nan)
    for i, layer in enumerate(layers):
        at = tmap[layer].mean_prob
        ar = rmap[layer].mean_prob
        denom = at + ar
        defined = denom > 0
        matrix[i, defined] = (at[defined] - ar[defined]) / denom[defined]
    if mode == LSI_MODE_MEAN_OF_LSI:
        defined = ~np.isnan(matrix)
        n_defined = defined.sum(axis=0)
        sums = np.where(defined, matrix, 0.0).sum(axis=0)
        lsi_vec = np.where(n_defined > 0, sums / np.maximum(n_defined, 1), np.nan)
    elif mode == LSI_MODE_LSI_OF_MEANS:
        at = np.mean([tmap[layer].mean_prob for layer in layers], axis=0)
        ar = np.mean([rmap[layer].mean_prob for layer in layers], axis=0)
        denom = at + ar
        lsi_vec = np.full(n, np.nan)
        defined = denom > 0
        lsi_vec[defined] = (at[defined] - ar[defined]) / denom[defined]
    else:
        raise ValueError(f"unknown LSI mode '{mode}'")
    return tuple(layers), matrix, lsi_vec


def _categorize_vector(lsi_vec: np.ndarray, threshold: float):
    categories = []
    counts = {CATEGORY_TARGET: 0, CATEGORY_REF: 0, CATEGORY_SHARED: 0, CATEGORY_UNUSED: 0}
    for value in lsi_vec:
        if math.isnan(value):
            cat = CATEGORY_UNUSED
        elif value > threshold:
            cat = CATEGORY_TARGET
        elif value < -threshold:
            cat = CATEGORY_REF
        else:
            cat = CATEGORY_SHARED
        categories.append(cat)
        counts[cat] += 1
    return tuple(categories), counts


def categorize_experts(profiles_target: Sequence[LayerLanguageProfile],
                       profiles_ref: Sequence[LayerLanguageProfile],
                       threshold: float = 0.1,
                       mode: str = LSI_MODE_MEAN_OF_LSI) -> ExpertCategorization:
    """Classify experts as target-specific, reference-specific, shared, or unused.

    Per-layer LSI comes from mean routing probabilities; the per-expert value
    averages the per-layer LSI over the layers where it is defined (an
    expert with zero mass in both languages at a layer is excluded from that
    layer's mean). ``mode`` selects the alternative order of averaging.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must be in (0, 1)")
    layers, matrix, lsi_vec = _lsi_surface(profiles_target, profiles_ref, mode)
    categories, counts = _categorize_vector(lsi_vec, threshold)
    tgt = next(p.language for p in profiles_target if not p.empty)
    ref = next(p.language for p in profiles_ref if not p.empty)
    basis = next((p.prob_basis for p in profiles_target if not p.empty), PROB_BASIS_FULL)
    return ExpertCategorization(
        threshold=threshold, target_language=tgt, ref_language=ref,
        layers=layers, lsi=lsi_vec, lsi_matrix=matrix,
        categories=categories, counts=counts, mode=mode, prob_basis=basis)


def threshold_sensitivity(profiles_target, profiles_ref,
                          thresholds: Sequence[float] = DEFAULT_LSI_THRESHOLDS,
                          mode: str = LSI_MODE_MEAN_OF_LSI) -> list[ExpertCategorization]:
    """One categorization per threshold; shared counts are non-decreasing."""
    ts = list(thresholds)
    if not ts or any(not (0.0 < t < 1.0) for t in ts):
        raise ValueError("thresholds must be in (0, 1)")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("thresholds must be strictly increasing")
    layers, matrix, lsi_vec = _lsi_surface(profiles_target, profiles_ref, mode)
    tgt = next(p.language for p in profiles_target if not p.empty)
    ref = next(p.language for p in profiles_ref if not p.empty)
    basis = next((p.prob_basis for p in profiles_target if not p.empty), PROB_BASIS_FULL)
    out = []
    for t in ts:
        categories, counts = _categorize_vector(lsi_vec, t)
        out.append(ExpertCategorization(
            threshold=t, target_language=tgt, ref_language=ref,
            layers=layers, lsi=lsi_vec, lsi_matrix=matrix,
            categories=categories, counts=counts, mode=mode, prob_basis=basis))
    return out


@dataclass(frozen=True)
class CollapseConfig:
    """Deep-layer collapse detector settings (External Interface keys)."""

    deep_fraction: float = 0.2
    baseline_range: Optional[tuple[int, int]] = None  # index range into the layer list
    min_drop_bits: float = 0.5
    require_sd: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "CollapseConfig":
        br = d.get("baseline_range")
        return cls(
            deep_fraction=float(d.get("deep_fraction", 0.2)),
            baseline_range=None if br is None else (int(br[0]), int(br[1])),
            min_drop_bits=float(d.get("min_drop_bits", 0.5)),
            require_sd=bool(d.get("require_sd", True)),
        )

    def to_dict(self) -> dict:
        return {
            "deep_fraction": self.deep_fraction,
            "baseline_range": None if self.baseline_range is None else list(self.baseline_range),
            "min_drop_bits": self.min_drop_bits,
            "require_sd": self.require_sd,
        }


@dataclass(frozen=True)
class CollapseReport:
    """Outcome of deep-layer collapse detection for one target language."""

    target_language: str
    ref_language: str
    layers: tuple[int, ...]
    deep_window: tuple[int, int]        # first/last layer id of the deep window
    baseline_window: tuple[int, int]
    collapse_score: float               # baseline mean H - deep-window mean H (bits)
    collapsed: bool
    flagged_layers: tuple[int, ...]
    sd_criterion_passed: Optional[bool]
    gini_criterion_passed: bool
    config: CollapseConfig
    basis: str = "usage_entropy+gini"
    note: str = COLLAPSE_DEFAULTS_NOTE


def _series_checks(*series: MetricSeries):
    layer_sets = {s.layers for s in series}
    if len(layer_sets) != 1:
        raise ValueError("all series must share the same layer index set")
    layers = series[0].layers
    if len(layers) < 4:
        raise ValueError(f"need at least 4 layers to detect collapse, got {len(layers)}")
    return layers


def detect_collapse(entropy_target: MetricSeries, entropy_ref: MetricSeries,
                    gini_target: MetricSeries, gini_ref: MetricSeries,
                    config: CollapseConfig = CollapseConfig()) -> CollapseReport:
    """Flag a language-specific entropy collapse in the deepest layers.

    Overall verdict: the drop of mean target entropy from the baseline
    window to the deep window reaches ``min_drop_bits``, AND the deep-window
    entropy gap (ref - target) exceeds one chunk-SD when ``require_sd``, AND
    deep-window target Gini exceeds the baseline. Per-layer flags apply the
    same criteria layer by layer across all analyzed layers.
    """
    layers = _series_checks(entropy_target, entropy_ref, gini_target, gini_ref)
    n_layers = len(layers)
    if not (0.0 < config.deep_fraction <= 0.5):
        raise ValueError("deep_fraction must be in (0, 0.5]")
    deep_n = math.ceil(config.deep_fraction * n_layers)
    deep_slice = slice(n_layers - deep_n, n_layers)
    if config.baseline_range is not None:
        b0, b1 = config.baseline_range
        if not (0 <= b0 < b1 <= n_layers):
            raise ValueError(f"baseline_range {config.baseline_range} invalid for "
                             f"{n_layers} layers")
        base_slice = slice(b0, b1)
    else:
        base_slice = slice(0, n_layers - deep_n)

    h_t = np.asarray(entropy_target.pooled)
    h_r = np.asarray(entropy_ref.pooled)
    g_t = np.asarray(gini_target.pooled)

    base_h = float(h_t[base_slice].mean())
    base_g = float(g_t[base_slice].mean())
    score = base_h - float(h_t[deep_slice].mean())
    drop_ok = score >= config.min_drop_bits
    gini_ok = float(g_t[deep_slice].mean()) > base_g

    gaps = h_r - h_t
    sd_gap = None
    if config.require_sd:
        sd_t = entropy_target.chunk_sd
        sd_r = entropy_ref.chunk_sd
        missing = [layers[i] for i in range(n_layers)[deep_slice]
                   if sd_t[i] is None or sd_r[i] is None]
        if missing:
            raise ValueError(f"missing chunk-SD data in deep window at layers {missing}; "
                             "require_sd needs at least 2 chunks per layer")
        sd_gap = np.array([
            math.sqrt(sd_t[i] ** 2 + sd_r[i] ** 2) if sd_t[i] is not None and sd_r[i] is not None
            else np.nan
            for i in range(n_layers)])
        sd_ok = bool(gaps[deep_slice].mean() > sd_gap[deep_slice].mean())
    else:
        sd_ok = None

    collapsed = drop_ok and gini_ok and (sd_ok if config.require_sd else True)

    flagged = []
    for i, layer in enumerate(layers):
        drop_i = (base_h - h_t[i]) >= config.min_drop_bits
        gini_i = g_t[i] > base_g
        if config.require_sd:
            sd_i = sd_gap is not None and not math.isnan(sd_gap[i]) and gaps[i] > sd_gap[i]
        else:
            sd_i = True
        if drop_i and gini_i and sd_i:
            flagged.append(layer)

    return CollapseReport(
        target_language=entropy_target.language,
        ref_language=entropy_ref.language,
        layers=layers,
        deep_window=(layers[deep_slice][0], layers[deep_slice][-1]),
        baseline_window=(layers[base_slice][0], layers[base_slice][-1]),
        collapse_score=score,
        collapsed=collapsed,
        flagged_layers=tuple(flagged),
        sd_criterion_passed=sd_ok,
        gini_criterion_passed=gini_ok,
        config=config,
    )


@dataclass(frozen=True)
class SplitControlSummary:
    """Null-gap summary from same-language split trials."""

    language: str
    trials: int
    seed: int
    n_chunks: int
    mean_abs_gap: dict            # metric -> mean |gap| over layers and trials
    max_abs_gap: dict             # metric -> max |gap|
    collapse_flag_rate: float
    flagged_trials: int


def same_language_split_control(chunks: Sequence[ChunkAggregate],
                                num_experts: int, top_k: int,
                                trials: int = 20, seed: int = 0,
                                collapse_config: CollapseConfig = CollapseConfig(),
                                prob_basis: str = PROB_BASIS_FULL) -> SplitControlSummary:
    """Estimate the noise floor by splitting one language against itself.

    Each trial partitions the chunk ids into random halves, treats the
    halves as pseudo-languages, and runs the full gap and collapse analysis.
    Nonzero gaps here bound what sampling noise alone produces; the control
    is diagnostic, not a guarantee.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    languages = {c.language for c in chunks}
    if len(languages) != 1:
        raise ValueError(f"split control expects chunks of one language, got {sorted(languages)}")
    language = languages.pop()
    ids = sorted({c.chunk_id for c in chunks})
    if len(ids) < 4:
        raise ValueError(f"too few chunks for a split control: {len(ids)} < 4")

    rng = np.random.Generator(np.random.PCG64(seed))
    abs_gaps = {"usage_entropy": [], "gini": []}
    flagged_trials = 0
    for _ in range(trials):
        perm = rng.permutation(len(ids))
        half = (len(ids) + 1) // 2
        half_a = {ids[i] for i in perm[:half]}
        parts = {"a": [], "b": []}
        for c in chunks:
            parts["a" if c.chunk_id in half_a else "b"].append(c)
        series = {}
        for name, rows in parts.items():
            profiles = list(build_profiles(rows, num_experts, top_k, prob_basis).values())
            series[name] = {m: metric_series(profiles, m) for m in ("usage_entropy", "gini")}
        for m in ("usage_entropy", "gini"):
            gs = gap_series(series["a"][m], series["b"][m])
            abs_gaps[m].extend(abs(g) for g in gs.gaps)
        flagged = False
        for tgt, ref in (("b", "a"), ("a", "b")):
            report = detect_collapse(series[tgt]["usage_entropy"], series[ref]["usage_entropy"],
                                     series[tgt]["gini"], series[ref]["gini"],
                                     collapse_config)
            flagged = flagged or report.collapsed
        if flagged:
            flagged_trials += 1

    return SplitControlSummary(
        language=language, trials=trials, seed=seed, n_chunks=len(ids),
        mean_abs_gap={m: float(np.mean(v)) for m, v in abs_gaps.items()},
        max_abs_gap={m: float(np.max(v)) for m, v in abs_gaps.items()},
        collapse_flag_rate=flagged_trials / trials,
        flagged_trials=flagged_trials,
    )


@dataclass(frozen=True)
class TokenizationStats:
    """Pooled per-language segmentation statistics."""

    language: str
    tokens: int
    chars: int
    segments: int
    tokens_per_char: float
    tokens_per_segment: float


def tokenization_stats(per_chunk_counts: Sequence[tuple]) -> dict:
    """Pool per-chunk (language, chunk_id, tokens, chars, segments) counts.

    Ratios are quotients of the pooled totals, never means of per-chunk
    ratios. Returns ``{language: TokenizationStats}``.
    """
    totals: dict[str, list] = {}
    seen = set()
    for language, chunk_id, tokens, chars, segments in per_chunk_counts:
        key = (language, chunk_id)
        if key in seen:
            raise ValueError(f"duplicate chunk counts for {key}")
        seen.add(key)
        t = totals.setdefault(language, [0, 0, 0])
        t[0] += int(tokens)
        t[1] += int(chars)
        t[2] += int(segments)
    out = {}
    for language in sorted(totals):
        tokens, chars, segments = totals[language]
        if chars <= 0:
            raise ValueError(f"zero chars for language '{language}'")
        if segments <= 0:
            raise ValueError(f"zero segments for language '{language}'")
        out[language] = TokenizationStats(
            language=language, tokens=tokens, chars=chars, segments=segments,
            tokens_per_char=tokens / chars, tokens_per_segment=tokens / segments)
    return out


def tokenization_from_chunks(chunks: Sequence[ChunkAggregate]) -> dict:
    """Derive tokenization stats from chunk rows (each chunk counted once)."""
    rows = {}
    for c in chunks:
        key = (c.language, c.chunk_id)
        if key not in rows:
            rows[key] = (c.language, c.chunk_id, c.content_token_count,
                         c.char_count, c.segment_count)
    return tokenization_stats(list(rows.values()))
