"""Report assembly: end-to-end analysis over trace files.

``analyze`` turns one or more trace files (model variants) into a
DiagnosticsReport: per-layer metric series per language, cross-language
similarity series, gap series, collapse detection, expert categorization at
every configured threshold, split-control summaries, and tokenization
statistics. Reports are deterministic: fixed field order, reals rounded to
9 significant digits, no timestamps, atomic file writes.

Report schema version: "1". See README for the field-by-field layout.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .aggregate import (SERIES_METRICS, GapSeries, MetricSeries, build_profiles,
                        gap_series, metric_series)
from .diagnostics import (DEFAULT_LSI_THRESHOLDS, CollapseConfig, CollapseReport,
                          ExpertCategorization, SplitControlSummary,
                          detect_collapse, same_language_split_control,
                          threshold_sensitivity, tokenization_from_chunks)
from .trace import (CHUNK_AGGREGATE, PROB_BASIS_FULL, TOKEN_TOPK_ONLY,
                    TraceValidationError, aggregate_tokens, read_trace,
                    read_tokenization_sidecar)

SCHEMA_VERSION = "1"
EMIT_FLAGS = ("layer_csv", "summary", "gaps", "categorization", "controls")
CROSS_METRICS = ("cosine", "topk_overlap", "spearman_rho", "kendall_tau")


class AnalysisInfeasibleError(Exception):
    """Analysis cannot proceed: empty profiles, or degraded probability
    basis where full probabilities are required."""


@dataclass
class AnalysisConfig:
    """Mirrors the CLI flags; see diagnostics External Interface keys."""

    variants: list                      # [(name, [trace paths])]
    reference_language: str
    target_languages: Optional[list] = None
    output_dir: Optional[str] = None
    deep_fraction: float = 0.2
    baseline_range: Optional[tuple[int, int]] = None
    min_drop_bits: float = 0.5
    require_sd: bool = True
    lsi_thresholds: tuple = DEFAULT_LSI_THRESHOLDS
    lsi_default_threshold: float = 0.1
    split_trials: int = 20
    seed: int = 0
    emit: tuple = EMIT_FLAGS
    require_full_probs: bool = False
    min_share: float = 0.0
    sidecars: dict = field(default_factory=dict)  # variant name -> sidecar path

    def collapse_config(self) -> CollapseConfig:
        return CollapseConfig(deep_fraction=self.deep_fraction,
                              baseline_range=self.baseline_range,
                              min_drop_bits=self.min_drop_bits,
                              require_sd=self.require_sd)

    def validate(self) -> "AnalysisConfig":
        if not self.variants:
            raise ValueError("at least one variant trace is required")
        if self.target_languages:
            if self.reference_language in self.target_languages:
                raise ValueError("reference language cannot also be a target language")
        for flag in self.emit:
            if flag not in EMIT_FLAGS:
                raise ValueError(f"unknown emit flag '{flag}'; expected one of {EMIT_FLAGS}")
        if self.lsi_default_threshold not in self.lsi_thresholds:
            raise ValueError("lsi_default_threshold must be one of lsi_thresholds")
        return self


def _round9(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        return None
    return float(f"{x:.9g}")


def _series_dict(s: MetricSeries) -> dict:
    return {
        "layers": list(s.layers),
        "pooled": [_round9(v) for v in s.pooled],
        "chunk_mean": [_round9(v) for v in s.chunk_mean],
        "chunk_sd": [_round9(v) for v in s.chunk_sd],
        "n_chunks": list(s.n_chunks),
    }


def _gap_dict(g: GapSeries) -> dict:
    return {
        "metric": g.metric,
        "ref_language": g.ref_language,
        "target_language": g.target_language,
        "layers": list(g.layers),
        "ref_values": [_round9(v) for v in g.ref_values],
        "target_values": [_round9(v) for v in g.target_values],
        "gaps": [_round9(v) for v in g.gaps],
    }


def _collapse_dict(r: CollapseReport) -> dict:
    return {
        "target_language": r.target_language,
        "ref_language": r.ref_language,
        "collapsed": r.collapsed,
        "collapse_score_bits": _round9(r.collapse_score),
        "deep_window": list(r.deep_window),
        "baseline_window": list(r.baseline_window),
        "flagged_layers": list(r.flagged_layers),
        "sd_criterion_passed": r.sd_criterion_passed,
        "gini_criterion_passed": r.gini_criterion_passed,
        "config": r.config.to_dict(),
        "basis": r.basis,
        "note": r.note,
    }


def _categorization_dict(c: ExpertCategorization, include_detail: bool) -> dict:
    d = {
        "threshold": c.threshold,
        "counts": {k: int(v) for k, v in c.counts.items()},
        "mode": c.mode,
        "prob_basis": c.prob_basis,
    }
    if include_detail:
        d["lsi"] = [_round9(v) for v in c.lsi]
        d["categories"] = list(c.categories)
    return d


def _control_dict(s: SplitControlSummary) -> dict:
    return {
        "language": s.language,
        "trials": s.trials,
        "seed": s.seed,
        "n_chunks": s.n_chunks,
        "mean_abs_gap": {k: _round9(v) for k, v in s.mean_abs_gap.items()},
        "max_abs_gap": {k: _round9(v) for k, v in s.max_abs_gap.items()},
        "collapse_flag_rate": _round9(s.collapse_flag_rate),
        "flagged_trials": s.flagged_trials,
    }


def _tap_selection_entropy(records, sel: dict):
    """Accumulate per-token router entropy while records stream through."""
    for rec in records:
        if rec.is_content:
            if rec.full_probs is not None:
                p = np.asarray(rec.full_probs)
            else:
                p = np.asarray(rec.topk_probs, dtype=np.float64)
                total = p.sum()
                if total > 0:
                    p = p / total  # degraded: renormalized top-k distribution
            nz = p[p > 0]
            h = float(-math.fsum(nz * np.log2(nz))) + 0.0
            cell = sel.setdefault((rec.layer, rec.language), [0.0, 0])
            cell[0] += h
            cell[1] += 1
        yield rec


def _load_variant(name: str, paths: Sequence, sidecar=None):
    """Read all trace files of one variant into chunk rows + side stats."""
    metas = []
    all_chunks = []
    selection: dict = {}
    tokenization = read_tokenization_sidecar(sidecar) if sidecar else None
    for path in paths:
        meta, records = read_trace(path)
        metas.append(meta)
        if meta.capture_mode == CHUNK_AGGREGATE:
            all_chunks.extend(records)
        else:
            all_chunks.extend(aggregate_tokens(
                _tap_selection_entropy(records, selection), meta,
                tokenization=tokenization))
    first = metas[0]
    for m in metas[1:]:
        if (m.num_experts, m.top_k, m.moe_layers) != (
                first.num_experts, first.top_k, first.moe_layers):
            raise TraceValidationError(
                f"incompatible metas within variant '{name}': "
                f"N/K/moe_layers differ between trace files")
    basis = PROB_BASIS_FULL
    if any(m.prob_basis != PROB_BASIS_FULL or m.capture_mode == TOKEN_TOPK_ONLY
           for m in metas):
        basis = "topk_only"
    languages = sorted({lang for m in metas for lang in m.languages})
    modes = sorted({m.capture_mode for m in metas})
    return {
        "meta": first,
        "languages": languages,
        "capture_modes": modes,
        "prob_basis": basis,
        "chunks": all_chunks,
        "selection": selection,
    }


def _selection_series(selection: dict, language: str, layers) -> Optional[dict]:
    if not selection:
        return None
    pooled = []
    for layer in layers:
        cell = selection.get((layer, language))
        pooled.append(None if cell is None or cell[1] == 0 else cell[0] / cell[1])
    if all(v is None for v in pooled):
        return None
    return {"layers": list(layers), "pooled": [_round9(v) for v in pooled]}


def analyze(config: AnalysisConfig) -> tuple[dict, list]:
    """Run the full diagnostics pipeline; returns (report, written files)."""
    config.validate()
    collapse_cfg = config.collapse_config()
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "reference_language": config.reference_language,
            "target_languages": config.target_languages,
            "deep_fraction": config.deep_fraction,
            "baseline_range": (None if config.baseline_range is None
                               else list(config.baseline_range)),
            "min_drop_bits": config.min_drop_bits,
            "require_sd": config.require_sd,
            "lsi_thresholds": list(config.lsi_thresholds),
            "lsi_default_threshold": config.lsi_default_threshold,
            "split_trials": config.split_trials,
            "seed": config.seed,
            "min_share": config.min_share,
        },
        "variants": {},
    }

    for name, paths in config.variants:
        data = _load_variant(name, paths, sidecar=config.sidecars.get(name))
        if config.require_full_probs and data["prob_basis"] != PROB_BASIS_FULL:
            raise AnalysisInfeasibleError(
                f"variant '{name}' carries top-k-only probabilities but the "
                "configuration requires full probability vectors")
        report["variants"][name] = _analyze_variant(name, data, config, collapse_cfg)

    written = []
    if config.output_dir:
        written = _emit_files(report, config)
    return report, written


def _analyze_variant(name: str, data: dict, config: AnalysisConfig,
                     collapse_cfg: CollapseConfig) -> dict:
    meta = data["meta"]
    chunks = data["chunks"]
    profiles = build_profiles(chunks, meta.num_experts, meta.top_k, data["prob_basis"])
    by_lang: dict[str, list] = {}
    for (layer, language), profile in profiles.items():
        if not profile.empty:
            by_lang.setdefault(language, []).append(profile)

    ref = config.reference_language
    if ref not in by_lang:
        raise AnalysisInfeasibleError(
            f"variant '{name}': no non-empty profiles for reference language '{ref}'")
    targets = config.target_languages or [l for l in sorted(by_lang) if l != ref]
    missing = [t for t in targets if t not in by_lang]
    if missing:
        raise AnalysisInfeasibleError(
            f"variant '{name}': no non-empty profiles for target language(s) {missing}")

    analyzed = [ref] + [t for t in targets]
    series: dict[str, dict] = {}
    for language in analyzed:
        series[language] = {m: metric_series(by_lang[language], m, config.min_share)
                            for m in SERIES_METRICS}

    layers = series[ref]["usage_entropy"].layers
    out = {
        "meta": meta.to_dict(),
        "mode": {
            "capture_modes": data["capture_modes"],
            "prob_basis": data["prob_basis"],
            "degraded": data["prob_basis"] != PROB_BASIS_FULL,
            "selection_entropy_available": bool(data["selection"]),
        },
        "reference_language": ref,
        "target_languages": list(targets),
        "layers": list(layers),
        "series": {},
        "cross": {},
        "gaps": {},
        "collapse": {},
        "categorization": {},
        "controls": {},
        "tokenization": None,
        "summary": {},
    }

    for language in analyzed:
        entry = {m: _series_dict(series[language][m]) for m in SERIES_METRICS}
        entry["selection_entropy"] = _selection_series(data["selection"], language, layers)
        out["series"][language] = entry

    ref_profiles = {p.layer: p for p in by_lang[ref]}
    for target in targets:
        tgt_profiles = {p.layer: p for p in by_lang[target]}
        common = [l for l in layers if l in tgt_profiles and l in ref_profiles]
        cross = {m: [] for m in CROSS_METRICS}
        for layer in common:
            u = ref_profiles[layer].mean_prob
            v = tgt_profiles[layer].mean_prob
            cross["cosine"].append(metrics.cosine_similarity(u, v))
            cross["topk_overlap"].append(metrics.topk_overlap(u, v, meta.top_k))
            cross["spearman_rho"].append(metrics.spearman_rho(u, v))
            cross["kendall_tau"].append(metrics.kendall_tau(u, v))
        out["cross"][target] = {"layers": common}
        out["cross"][target].update(
            {m: [_round9(v) for v in vals] for m, vals in cross.items()})

        out["gaps"][target] = {
            m: _gap_dict(gap_series(series[ref][m], series[target][m]))
            for m in ("usage_entropy", "gini")}

        collapse_entry = {}
        try:
            forward = detect_collapse(series[target]["usage_entropy"],
                                      series[ref]["usage_entropy"],
                                      series[target]["gini"], series[ref]["gini"],
                                      collapse_cfg)
            reverse = detect_collapse(series[ref]["usage_entropy"],
                                      series[target]["usage_entropy"],
                                      series[ref]["gini"], series[target]["gini"],
                                      collapse_cfg)
            collapse_entry = {"target": _collapse_dict(forward),
                              "reference_check": _collapse_dict(reverse)}
        except ValueError as exc:
            collapse_entry = {"error": str(exc)}
        out["collapse"][target] = collapse_entry

        cats = threshold_sensitivity(by_lang[target], by_lang[ref],
                                     config.lsi_thresholds)
        out["categorization"][target] = {
            "thresholds": [
                _categorization_dict(c, include_detail=(
                    c.threshold == config.lsi_default_threshold))
                for c in cats],
            "default_threshold": config.lsi_default_threshold,
        }

    if "controls" in config.emit and config.split_trials >= 1:
        for language in analyzed:
            lang_chunks = [c for c in chunks if c.language == language]
            try:
                summary = same_language_split_control(
                    lang_chunks, meta.num_experts, meta.top_k,
                    trials=config.split_trials, seed=config.seed,
                    collapse_config=collapse_cfg, prob_basis=data["prob_basis"])
                out["controls"][language] = _control_dict(summary)
            except ValueError as exc:
                out["controls"][language] = {"error": str(exc)}

    try:
        stats = tokenization_from_chunks(chunks)
        out["tokenization"] = {
            lang: {
                "tokens": s.tokens, "chars": s.chars, "segments": s.segments,
                "tokens_per_char": _round9(s.tokens_per_char),
                "tokens_per_segment": _round9(s.tokens_per_segment),
            } for lang, s in stats.items()}
    except ValueError:
        out["tokenization"] = None

    mean_h = {l: _round9(float(np.mean(series[l]["usage_entropy"].pooled)))
              for l in analyzed}
    mean_g = {l: _round9(float(np.mean(series[l]["gini"].pooled))) for l in analyzed}
    mean_cos = {}
    for target in targets:
        vals = [v for v in out["cross"][target]["cosine"] if v is not None]
        mean_cos[target] = _round9(float(np.mean(vals))) if vals else None
    default_counts = {}
    for target in targets:
        for entry in out["categorization"][target]["thresholds"]:
            if entry["threshold"] == config.lsi_default_threshold:
                default_counts[target] = entry["counts"]
    out["summary"] = {
        "mean_usage_entropy": mean_h,
        "mean_gini": mean_g,
        "mean_cosine": mean_cos,
        "category_counts": default_counts,
        "collapse": {
            t: {
                "collapsed": out["collapse"][t].get("target", {}).get("collapsed"),
                "collapse_score_bits": out["collapse"][t].get("target", {}).get(
                    "collapse_score_bits"),
            } for t in targets},
    }
    return out


# ---------------------------------------------------------------------------
# File emission
# ---------------------------------------------------------------------------

def _atomic_write_text(path, text: str):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header: list, rows: list) -> str:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def _emit_files(report: dict, config: AnalysisConfig) -> list:
    outdir = config.output_dir
    os.makedirs(outdir, exist_ok=True)
    written = []

    def emit(name, text):
        path = os.path.join(outdir, name)
        _atomic_write_text(path, text)
        written.append(path)

    if "summary" in config.emit:
        emit("report.json", json.dumps(report, indent=2, ensure_ascii=False,
                                       allow_nan=False) + "\n")

    if "layer_csv" in config.emit:
        rows = []
        for vname, variant in report["variants"].items():
            for language, entry in variant["series"].items():
                for metric in SERIES_METRICS:
                    s = entry[metric]
                    for i, layer in enumerate(s["layers"]):
                        rows.append([vname, language, layer, metric,
                                     _fmt(s["pooled"][i]), _fmt(s["chunk_mean"][i]),
                                     _fmt(s["chunk_sd"][i]), s["n_chunks"][i]])
                sel = entry.get("selection_entropy")
                if sel:
                    for i, layer in enumerate(sel["layers"]):
                        rows.append([vname, language, layer, "selection_entropy",
                                     _fmt(sel["pooled"][i]), "", "", ""])
        emit("layers.csv", _csv_text(
            ["variant", "language", "layer", "metric", "pooled",
             "chunk_mean", "chunk_sd", "n_chunks"], rows))

        rows = []
        for vname, variant in report["variants"].items():
            ref = variant["reference_language"]
            for target, cross in variant["cross"].items():
                for metric in CROSS_METRICS:
                    for i, layer in enumerate(cross["layers"]):
                        rows.append([vname, ref, target, layer, metric,
                                     _fmt(cross[metric][i])])
        emit("cross.csv", _csv_text(
            ["variant", "reference", "target", "layer", "metric", "value"], rows))

    if "gaps" in config.emit:
        rows = []
        for vname, variant in report["variants"].items():
            for target, gaps in variant["gaps"].items():
                for metric, g in gaps.items():
                    for i, layer in enumerate(g["layers"]):
                        rows.append([vname, metric, g["ref_language"],
                                     g["target_language"], layer,
                                     _fmt(g["ref_values"][i]),
                                     _fmt(g["target_values"][i]),
                                     _fmt(g["gaps"][i])])
        emit("gaps.csv", _csv_text(
            ["variant", "metric", "reference", "target", "layer",
             "ref_value", "target_value", "gap"], rows))

    if "categorization" in config.emit:
        rows = []
        for vname, variant in report["variants"].items():
            for target, cat in variant["categorization"].items():
                for entry in cat["thresholds"]:
                    if "lsi" not in entry:
                        continue
                    for expert, (value, category) in enumerate(
                            zip(entry["lsi"], entry["categories"])):
                        rows.append([vname, target, _fmt(entry["threshold"]),
                                     expert, _fmt(value), category])
        emit("categorization.csv", _csv_text(
            ["variant", "target", "threshold", "expert", "lsi", "category"], rows))

    names = list(report["variants"])
    if len(names) >= 2 and "layer_csv" in config.emit:
        base = names[0]
        rows = []
        for other in names[1:]:
            va, vb = report["variants"][base], report["variants"][other]
            for language in va["series"]:
                if language not in vb["series"]:
                    continue
                for metric in SERIES_METRICS:
                    sa, sb = va["series"][language][metric], vb["series"][language][metric]
                    if sa["layers"] != sb["layers"]:
                        continue
                    for i, layer in enumerate(sa["layers"]):
                        a, b = sa["pooled"][i], sb["pooled"][i]
                        delta = None if a is None or b is None else _round9(b - a)
                        rows.append([base, other, language, layer, metric,
                                     _fmt(a), _fmt(b), _fmt(delta)])
        emit("variants_delta.csv", _csv_text(
            ["baseline", "variant", "language", "layer", "metric",
             "baseline_value", "variant_value", "delta"], rows))

    return written


# ---------------------------------------------------------------------------
# Variant comparison
# ---------------------------------------------------------------------------

def _pair_variants(a: dict, b: dict) -> list:
    names_a, names_b = list(a["variants"]), list(b["variants"])
    common = [n for n in names_a if n in names_b]
    if common:
        return [(n, n) for n in common]
    if len(names_a) == 1 and len(names_b) == 1:
        return [(names_a[0], names_b[0])]
    raise ValueError("structural mismatch: no variant names in common and "
                     "reports are not single-variant")


def compare(report_a: dict, report_b: dict) -> dict:
    """Per-layer metric deltas and category-count deltas (b minus a)."""
    pairs = _pair_variants(report_a, report_b)
    out = {"schema_version": SCHEMA_VERSION, "pairs": []}
    for name_a, name_b in pairs:
        va, vb = report_a["variants"][name_a], report_b["variants"][name_b]
        if va["layers"] != vb["layers"]:
            raise ValueError(f"structural mismatch: layers differ for "
                             f"'{name_a}' vs '{name_b}'")
        langs_a, langs_b = set(va["series"]), set(vb["series"])
        if langs_a != langs_b:
            raise ValueError(f"structural mismatch: languages differ for "
                             f"'{name_a}' vs '{name_b}'")
        entry = {"variant_a": name_a, "variant_b": name_b,
                 "layers": va["layers"], "series_delta": {}, "cross_delta": {},
                 "category_counts_delta": {}, "collapse": {}, "summary_delta": {}}
        for language in sorted(langs_a):
            deltas = {}
            for metric in SERIES_METRICS:
                pa = va["series"][language][metric]["pooled"]
                pb = vb["series"][language][metric]["pooled"]
                deltas[metric] = [None if x is None or y is None else _round9(y - x)
                                  for x, y in zip(pa, pb)]
            entry["series_delta"][language] = deltas
        for target in va["cross"]:
            if target not in vb["cross"]:
                continue
            ca, cb = va["cross"][target], vb["cross"][target]
            entry["cross_delta"][target] = {
                m: [None if x is None or y is None else _round9(y - x)
                    for x, y in zip(ca[m], cb[m])]
                for m in CROSS_METRICS}
        for target in va["categorization"]:
            if target not in vb["categorization"]:
                continue
            da = {e["threshold"]: e["counts"]
                  for e in va["categorization"][target]["thresholds"]}
            db = {e["threshold"]: e["counts"]
                  for e in vb["categorization"][target]["thresholds"]}
            entry["category_counts_delta"][target] = {
                str(t): {k: db[t][k] - da[t][k] for k in da[t]}
                for t in da if t in db}
        for target in va["collapse"]:
            if target not in vb["collapse"]:
                continue
            ta = va["collapse"][target].get("target", {})
            tb = vb["collapse"][target].get("target", {})
            sa, sb = ta.get("collapse_score_bits"), tb.get("collapse_score_bits")
            entry["collapse"][target] = {
                "a_collapsed": ta.get("collapsed"),
                "b_collapsed": tb.get("collapsed"),
                "score_delta_bits": None if sa is None or sb is None
                else _round9(sb - sa),
            }
        ma, mb = va["summary"]["mean_cosine"], vb["summary"]["mean_cosine"]
        entry["summary_delta"]["mean_cosine"] = {
            t: None if ma.get(t) is None or mb.get(t) is None
            else _round9(mb[t] - ma[t])
            for t in ma}
        out["pairs"].append(entry)
    return out


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_comparison(comparison: dict, outdir) -> list:
    os.makedirs(outdir, exist_ok=True)
    written = []
    path = os.path.join(outdir, "comparison.json")
    _atomic_write_text(path, json.dumps(comparison, indent=2, ensure_ascii=False,
                                        allow_nan=False) + "\n")
    written.append(path)
    rows = []
    for pair in comparison["pairs"]:
        for language, deltas in pair["series_delta"].items():
            for metric, values in deltas.items():
                for layer, delta in zip(pair["layers"], values):
                    rows.append([pair["variant_a"], pair["variant_b"], language,
                                 layer, metric, _fmt(delta)])
    path = os.path.join(outdir, "deltas.csv")
    _atomic_write_text(path, _csv_text(
        ["variant_a", "variant_b", "language", "layer", "metric", "delta"], rows))
    written.append(path)
    return written
