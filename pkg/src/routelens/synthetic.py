"""Parametric trace generators with analytically known metric values.

Scenarios sample a per-token routing probability vector from a configurable
law at every (language, chunk, layer), extract the top-K experts with the
documented tie-break, and emit either a token-level trace or chunk
aggregates directly (the latter avoids materializing huge token files).

The pseudo-random source is numpy's PCG64, consumed in a fixed
(language, chunk, layer) order, so identical seeds produce byte-identical
files across platforms. Definition-level oracles for entropy and Gini live
here too, deliberately implemented with different algorithms than the
metric kernels (plain summation / mean absolute difference).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .trace import (CHUNK_AGGREGATE, TOKEN_FULL_PROBS, TOKEN_TOPK_ONLY,
                    ChunkAggregate, TokenRouting, TraceMeta, _topk_rows,
                    _topk_set_rows, PROB_BASIS_TOPK, write_chunk_trace,
                    write_token_trace, write_tokenization_sidecar)

LAW_UNIFORM = "uniform"
LAW_CONCENTRATED = "concentrated"
LAW_DIRICHLET = "dirichlet"
LAW_ZIPF = "zipf"

# Nominal per-token text statistics for sidecars (synthetic corpora carry no
# real text): 5 chars and 1 whitespace segment per token.
_CHARS_PER_TOKEN = 5


@dataclass(frozen=True)
class RoutingLaw:
    """Per-token probability-vector law.

    * ``uniform``: flat Dirichlet over all experts (exchangeable; selection
      frequencies converge to 1/N each).
    * ``concentrated(m)``: flat Dirichlet over ``m`` support experts, exact
      zeros elsewhere. With m <= K every support expert is selected for
      every token, so usage entropy is exactly log2(m) at K = m.
    * ``dirichlet(alpha)``: symmetric Dirichlet; smaller alpha gives spikier
      per-token vectors (lower selection entropy) while aggregate selection
      stays exchangeable.
    * ``zipf(s)``: Dirichlet with concentration proportional to the weights
      (i+1)^-s, skewing aggregate load toward low expert ids; s = 0 reduces
      to uniform.
    """

    law: str = LAW_UNIFORM
    m: Optional[int] = None
    alpha: Optional[float] = None
    s: Optional[float] = None
    experts: Optional[tuple[int, ...]] = None

    def validate(self, num_experts: int) -> "RoutingLaw":
        if self.law == LAW_UNIFORM:
            pass
        elif self.law == LAW_CONCENTRATED:
            if self.m is None or not (1 <= self.m <= num_experts):
                raise ValueError(f"concentrated law needs m in [1, {num_experts}]")
            if self.experts is not None:
                ids = tuple(self.experts)
                if len(ids) != self.m or len(set(ids)) != self.m:
                    raise ValueError("experts must list m distinct ids")
                if any(not (0 <= e < num_experts) for e in ids):
                    raise ValueError("experts contain out-of-range ids")
        elif self.law == LAW_DIRICHLET:
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("dirichlet law needs alpha > 0")
        elif self.law == LAW_ZIPF:
            if self.s is None or self.s < 0:
                raise ValueError("zipf law needs s >= 0")
        else:
            raise ValueError(f"unknown law '{self.law}'")
        return self

    def support(self) -> Optional[tuple[int, ...]]:
        if self.law != LAW_CONCENTRATED:
            return None
        return self.experts if self.experts is not None else tuple(range(self.m))

    def to_dict(self) -> dict:
        d = {"law": self.law}
        if self.m is not None:
            d["m"] = self.m
        if self.alpha is not None:
            d["alpha"] = self.alpha
        if self.s is not None:
            d["s"] = self.s
        if self.experts is not None:
            d["experts"] = list(self.experts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingLaw":
        return cls(law=str(d.get("law", LAW_UNIFORM)),
                   m=None if d.get("m") is None else int(d["m"]),
                   alpha=None if d.get("alpha") is None else float(d["alpha"]),
                   s=None if d.get("s") is None else float(d["s"]),
                   experts=None if d.get("experts") is None
                   else tuple(int(x) for x in d["experts"]))


@dataclass(frozen=True)
class LawOverride:
    """Replace the default law for given languages and/or layers (None = all)."""

    law: RoutingLaw
    language: Optional[str] = None
    layers: Optional[tuple[int, ...]] = None

    def to_dict(self) -> dict:
        d = {"law": self.law.to_dict()}
        if self.language is not None:
            d["language"] = self.language
        if self.layers is not None:
            d["layers"] = list(self.layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LawOverride":
        return cls(law=RoutingLaw.from_dict(d["law"]),
                   language=d.get("language"),
                   layers=None if d.get("layers") is None
                   else tuple(int(x) for x in d["layers"]))


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of a synthetic routing scenario; deterministic given seed."""

    num_experts: int
    top_k: int
    num_layers: int
    languages: tuple[str, ...]
    chunks_per_language: int
    tokens_per_chunk: int
    seed: int = 0
    default_law: RoutingLaw = RoutingLaw()
    overrides: tuple[LawOverride, ...] = ()

    def validate(self) -> "ScenarioSpec":
        if self.num_experts < 1:
            raise ValueError("num_experts must be positive")
        if not (1 <= self.top_k <= self.num_experts):
            raise ValueError("top_k must be in [1, num_experts]")
        if self.num_layers < 1:
            raise ValueError("num_layers must be positive")
        if not self.languages or len(set(self.languages)) != len(self.languages):
            raise ValueError("languages must be non-empty and unique")
        if self.chunks_per_language < 1 or self.tokens_per_chunk < 1:
            raise ValueError("chunks_per_language and tokens_per_chunk must be positive")
        self.default_law.validate(self.num_experts)
        for ov in self.overrides:
            ov.law.validate(self.num_experts)
            if ov.language is not None and ov.language not in self.languages:
                raise ValueError(f"override language '{ov.language}' not in languages")
            if ov.layers is not None and any(
                    not (0 <= l < self.num_layers) for l in ov.layers):
                raise ValueError("override layers out of range")
        return self

    def law_for(self, language: str, layer: int) -> RoutingLaw:
        chosen = self.default_law
        for ov in self.overrides:  # later overrides win
            if ov.language is not None and ov.language != language:
                continue
            if ov.layers is not None and layer not in ov.layers:
                continue
            chosen = ov.law
        return chosen

    def moe_layers(self) -> tuple[int, ...]:
        return tuple(range(self.num_layers))

    def meta(self, capture_mode: str = TOKEN_FULL_PROBS) -> TraceMeta:
        basis = PROB_BASIS_TOPK if capture_mode == TOKEN_TOPK_ONLY else "full"
        return TraceMeta(
            model_id=f"synthetic-N{self.num_experts}-K{self.top_k}-seed{self.seed}",
            num_experts=self.num_experts,
            top_k=self.top_k,
            moe_layers=self.moe_layers(),
            languages=self.languages,
            capture_mode=capture_mode,
            tokenizer_id="synthetic",
            prob_basis=basis,
        )

    def to_dict(self) -> dict:
        return {
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "num_layers": self.num_layers,
            "languages": list(self.languages),
            "chunks_per_language": self.chunks_per_language,
            "tokens_per_chunk": self.tokens_per_chunk,
            "seed": self.seed,
            "default_law": self.default_law.to_dict(),
            "overrides": [ov.to_dict() for ov in self.overrides],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        spec = cls(
            num_experts=int(d["num_experts"]),
            top_k=int(d["top_k"]),
            num_layers=int(d["num_layers"]),
            languages=tuple(str(x) for x in d["languages"]),
            chunks_per_language=int(d["chunks_per_language"]),
            tokens_per_chunk=int(d["tokens_per_chunk"]),
            seed=int(d.get("seed", 0)),
            default_law=RoutingLaw.from_dict(d.get("default_law", {"law": LAW_UNIFORM})),
            overrides=tuple(LawOverride.from_dict(x) for x in d.get("overrides", [])),
        )
        return spec.validate()

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


# Sampling proceeds in fixed-size row blocks for cache locality. PCG64 calls
# continue the stream, so blocked sampling draws the same values as one call.
_SAMPLE_BLOCK_ROWS = 2048


def _raw_weights(rng, law: RoutingLaw, tokens: int, n: int) -> np.ndarray:
    # Exponential laws sample in float32: the values widen to float64
    # exactly, halving memory traffic without affecting any stored value,
    # and the per-row mass error (~1e-7) sits far inside the 1e-4 tolerance.
    if law.law == LAW_UNIFORM:
        return rng.standard_exponential(size=(tokens, n), dtype=np.float32)
    if law.law == LAW_CONCENTRATED:
        support = np.asarray(law.support(), dtype=np.int64)
        g = np.zeros((tokens, n), dtype=np.float32)
        g[:, support] = rng.standard_exponential(size=(tokens, support.size),
                                                 dtype=np.float32)
        return g
    if law.law == LAW_DIRICHLET:
        return rng.gamma(law.alpha, 1.0, size=(tokens, n))
    if law.law == LAW_ZIPF:
        weights = (np.arange(1, n + 1, dtype=np.float64)) ** (-law.s)
        alpha = n * weights / weights.sum()
        return rng.gamma(alpha, 1.0, size=(tokens, n))
    raise ValueError(f"unknown law '{law.law}'")


def sample_law(rng: np.random.Generator, law: RoutingLaw, tokens: int,
               num_experts: int) -> np.ndarray:
    """Sample a (tokens, N) matrix of probability rows from a routing law."""
    g = _raw_weights(rng, law, tokens, num_experts)
    sums = g.sum(axis=1)
    bad = np.nonzero(sums == 0.0)[0]
    while bad.size:  # underflow to zero rows; resample the affected rows
        g[bad] = _raw_weights(rng, law, bad.size, num_experts)
        sums[bad] = g[bad].sum(axis=1)
        bad = bad[sums[bad] == 0.0]
    np.divide(g, sums[:, None], out=g)
    return g


def _iter_sample_blocks(rng, law, tokens, num_experts):
    for lo in range(0, tokens, _SAMPLE_BLOCK_ROWS):
        rows = min(_SAMPLE_BLOCK_ROWS, tokens - lo)
        yield lo, sample_law(rng, law, rows, num_experts)


def _iter_blocks(spec: ScenarioSpec):
    """Deterministic (language, chunk, layer) iteration order."""
    for language in spec.languages:
        for chunk_id in range(spec.chunks_per_language):
            for layer in spec.moe_layers():
                yield language, chunk_id, layer


def generate_trace(spec: ScenarioSpec, path, mode: str = TOKEN_FULL_PROBS,
                   sidecar: Optional[str] = None, sig_digits: Optional[int] = None) -> dict:
    """Realize a scenario as a trace file; returns a summary dict.

    ``mode`` selects token-level output (full or top-k-only records) or
    direct chunk-aggregate output. The same RNG stream is consumed in the
    same order in every mode, so a token trace and a directly generated
    aggregate trace describe the same draw.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    meta = spec.meta(mode)
    t = spec.tokens_per_chunk
    records_written = 0

    if mode in (TOKEN_FULL_PROBS, TOKEN_TOPK_ONLY):
        def gen_records():
            for language, chunk_id, layer in _iter_blocks(spec):
                law = spec.law_for(language, layer)
                for lo, probs in _iter_sample_blocks(rng, law, t, spec.num_experts):
                    topk = _topk_rows(probs, spec.top_k)
                    for row in range(probs.shape[0]):
                        ids = topk[row]
                        yield TokenRouting(
                            chunk_id=chunk_id, token_index=lo + row, layer=layer,
                            language=language, is_content=True,
                            topk_experts=tuple(int(i) for i in ids),
                            topk_probs=tuple(float(probs[row, i]) for i in ids),
                            full_probs=(tuple(float(x) for x in probs[row])
                                        if mode == TOKEN_FULL_PROBS else None),
                        )

        records_written = write_token_trace(path, meta, gen_records(), sig_digits=sig_digits)
        if sidecar:
            write_tokenization_sidecar(sidecar, _sidecar_rows(spec))
    elif mode == CHUNK_AGGREGATE:
        chunks = []
        for language, chunk_id, layer in _iter_blocks(spec):
            law = spec.law_for(language, layer)
            counts = np.zeros(spec.num_experts, dtype=np.int64)
            prob_sums = np.zeros(spec.num_experts)
            for _, probs in _iter_sample_blocks(rng, law, t, spec.num_experts):
                # selection counts only need the top-k set, not its ordering
                topk = _topk_set_rows(probs, spec.top_k)
                counts += np.bincount(topk.ravel(), minlength=spec.num_experts)
                prob_sums += probs.sum(axis=0, dtype=np.float64)
            chunks.append(ChunkAggregate(
                chunk_id=chunk_id, language=language, layer=layer,
                content_token_count=t,
                selection_counts=tuple(int(x) for x in counts),
                prob_sums=tuple(float(x) for x in prob_sums),
                char_count=_CHARS_PER_TOKEN * t,
                segment_count=t,
            ))
        records_written = write_chunk_trace(path, meta, chunks)
    else:
        raise ValueError(f"unknown generation mode '{mode}'")

    return {
        "path": str(path),
        "mode": mode,
        "records": records_written,
        "languages": list(spec.languages),
        "layers": spec.num_layers,
        "tokens_per_language": spec.chunks_per_language * t,
    }


def _sidecar_rows(spec: ScenarioSpec) -> list[dict]:
    rows = []
    for language in spec.languages:
        for chunk_id in range(spec.chunks_per_language):
            rows.append({
                "language": language,
                "chunk_id": chunk_id,
                "token_count": spec.tokens_per_chunk,
                "char_count": _CHARS_PER_TOKEN * spec.tokens_per_chunk,
                "segment_count": spec.tokens_per_chunk,
            })
    return rows


def gen_collapse_scenario(base: ScenarioSpec, deep_fraction: float,
                          target_language: str, m: int = 8) -> ScenarioSpec:
    """Plant a deep-layer collapse: the target language routes through only
    ``m`` experts in the last ``ceil(deep_fraction * L)`` layers, uniform
    elsewhere; other languages stay uniform everywhere."""
    base.validate()
    if target_language not in base.languages:
        raise ValueError(f"target language '{target_language}' not in scenario languages")
    if not (0.0 <= deep_fraction <= 1.0):
        raise ValueError("deep_fraction must be in [0, 1]")
    deep_n = math.ceil(deep_fraction * base.num_layers)
    if deep_n == 0:
        return base
    deep_layers = tuple(range(base.num_layers - deep_n, base.num_layers))
    override = LawOverride(law=RoutingLaw(law=LAW_CONCENTRATED, m=m),
                           language=target_language, layers=deep_layers)
    return replace(base, overrides=base.overrides + (override,))


# ---------------------------------------------------------------------------
# Definition-level oracles (kept algorithmically independent of metrics.py)
# ---------------------------------------------------------------------------

def oracle_entropy(counts) -> float:
    """H = -sum (c/S) log2 (c/S), plain summation."""
    values = [float(c) for c in counts]
    total = sum(values)
    if total <= 0:
        raise ValueError("degenerate input: no mass")
    acc = 0.0
    for c in values:
        if c > 0:
            p = c / total
            acc -= p * math.log2(p)
    return acc


def oracle_gini(counts) -> float:
    """Gini via the mean-absolute-difference identity:
    G = sum_ij |c_i - c_j| / (2 N^2 mean)."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("degenerate input: no mass")
    n = c.size
    mad = float(np.abs(c[:, None] - c[None, :]).sum())
    return mad / (2.0 * n * n * (total / n))


def oracle_metrics(counts) -> dict:
    return {"usage_entropy": oracle_entropy(counts), "gini": oracle_gini(counts)}


def law_expectation(law: RoutingLaw, num_experts: int, top_k: int) -> dict:
    """Analytic large-sample usage entropy / Gini for a law, where known."""
    law.validate(num_experts)
    if law.law in (LAW_UNIFORM, LAW_DIRICHLET):
        return {"usage_entropy": math.log2(num_experts), "gini": 0.0}
    if law.law == LAW_CONCENTRATED and law.m >= top_k:
        m, n = law.m, num_experts
        return {"usage_entropy": math.log2(m), "gini": (n - m) / n}
    return {"usage_entropy": None, "gini": None}
