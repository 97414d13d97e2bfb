"""routelens: per-layer, per-language expert-routing diagnostics for MoE models.

Captured routing traces (token-level or chunk-aggregate) are folded into
per-layer per-language utilization profiles and scored with load-balance and
language-specialization metrics: usage entropy, Gini coefficient, language
specificity index, cross-lingual cosine similarity, selection entropy,
top-k overlap, and rank correlations. Higher-order diagnostics detect
deep-layer routing collapse and bound the sampling-noise floor with
same-language split controls.
"""

from .aggregate import (GapSeries, LayerLanguageAccumulator, MetricSeries,
                        accumulate, build_profiles, finalize, gap_series,
                        merge, metric_series)
from .diagnostics import (CollapseConfig, CollapseReport, ExpertCategorization,
                          SplitControlSummary, TokenizationStats,
                          categorize_experts, detect_collapse,
                          same_language_split_control, threshold_sensitivity,
                          tokenization_from_chunks, tokenization_stats)
from .metrics import (active_expert_count, cosine_similarity, gini, kendall_tau,
                      lsi, selection_entropy, spearman_rho, topk_overlap,
                      usage_entropy)
from .report import AnalysisConfig, AnalysisInfeasibleError, analyze, compare
from .synthetic import (LawOverride, RoutingLaw, ScenarioSpec,
                        gen_collapse_scenario, generate_trace, law_expectation,
                        oracle_entropy, oracle_gini, oracle_metrics)
from .trace import (ChunkAggregate, LayerLanguageProfile, TokenRouting,
                    TraceError, TraceFormatError, TraceMeta,
                    TraceValidationError, aggregate_tokens,
                    convert_to_aggregate_file, read_trace, write_chunk_trace,
                    write_token_trace)

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig", "AnalysisInfeasibleError", "ChunkAggregate",
    "CollapseConfig", "CollapseReport", "ExpertCategorization", "GapSeries",
    "LawOverride", "LayerLanguageAccumulator", "LayerLanguageProfile",
    "MetricSeries", "RoutingLaw", "ScenarioSpec", "SplitControlSummary",
    "TokenRouting", "TokenizationStats", "TraceError", "TraceFormatError",
    "TraceMeta", "TraceValidationError", "accumulate", "active_expert_count",
    "aggregate_tokens", "analyze", "build_profiles", "categorize_experts",
    "compare", "convert_to_aggregate_file", "cosine_similarity",
    "detect_collapse", "finalize", "gap_series", "gen_collapse_scenario",
    "generate_trace", "gini", "kendall_tau", "law_expectation", "lsi", "merge",
    "metric_series", "oracle_entropy", "oracle_gini", "oracle_metrics",
    "read_trace", "same_language_split_control", "selection_entropy",
    "spearman_rho", "threshold_sensitivity", "tokenization_from_chunks",
    "tokenization_stats", "topk_overlap", "usage_entropy",
    "write_chunk_trace", "write_token_trace",
]
