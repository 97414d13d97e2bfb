"""Routing-trace data model and on-disk formats.

Two file formats are supported:

* **Token-level trace** (``capture_mode`` ``token_full_probs`` or
  ``token_topk_only``): line-delimited JSON. The first line is a header
  object ``{"meta": {...}}``; every following line is one token-routing
  record. One record describes one token at one MoE layer.

* **Chunk-aggregate trace** (``capture_mode`` ``chunk_aggregate``): a single
  JSON document ``{"meta": {...}, "chunks": [...]}`` whose rows carry
  per-chunk, per-layer, per-language sufficient statistics (selection counts
  and probability sums per expert).

All floats are written with shortest round-trip ``repr``, so write-then-read
reproduces values bit-exactly. Top-K lists are canonically ordered by
descending probability, ties broken by the lower expert id.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

TOKEN_FULL_PROBS = "token_full_probs"
TOKEN_TOPK_ONLY = "token_topk_only"
CHUNK_AGGREGATE = "chunk_aggregate"
CAPTURE_MODES = (TOKEN_FULL_PROBS, TOKEN_TOPK_ONLY, CHUNK_AGGREGATE)

PROB_BASIS_FULL = "full"
PROB_BASIS_TOPK = "topk_only"

# Per-token softmax mass tolerance; chunk/profile mass checks are relative.
TOKEN_PROB_MASS_TOL = 1e-4
CHUNK_PROB_MASS_REL_TOL = 1e-3

_EPOCH = "1970-01-01T00:00:00Z"


class TraceError(Exception):
    """Base class for trace parsing and validation failures."""


class TraceFormatError(TraceError):
    """Structurally unreadable file: bad header, bad JSON, truncation."""


class TraceValidationError(TraceError):
    """A record that parses but violates a data-model invariant."""

    def __init__(self, message: str, *, record: Optional[int] = None,
                 fieldname: Optional[str] = None, rule: Optional[str] = None):
        self.record = record
        self.fieldname = fieldname
        self.rule = rule
        parts = []
        if record is not None:
            parts.append(f"record {record}")
        if fieldname is not None:
            parts.append(f"field '{fieldname}'")
        prefix = " ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


def _require(cond: bool, message: str, *, record=None, fieldname=None, rule=None):
    if not cond:
        raise TraceValidationError(message, record=record, fieldname=fieldname, rule=rule)


@dataclass(frozen=True)
class TraceMeta:
    """Header describing a capture: model identity and routing geometry."""

    model_id: str
    num_experts: int
    top_k: int
    moe_layers: tuple[int, ...]
    languages: tuple[str, ...]
    capture_mode: str
    tokenizer_id: str = ""
    created_at: str = _EPOCH
    note: str = ""
    prob_basis: str = PROB_BASIS_FULL

    def __post_init__(self):
        object.__setattr__(self, "moe_layers", tuple(int(x) for x in self.moe_layers))
        object.__setattr__(self, "languages", tuple(str(x) for x in self.languages))

    def validate(self) -> "TraceMeta":
        _require(self.num_experts >= 1, "num_experts must be positive", fieldname="num_experts")
        _require(1 <= self.top_k <= self.num_experts,
                 f"top_k must be in [1, num_experts]; got {self.top_k} with N={self.num_experts}",
                 fieldname="top_k")
        _require(len(self.moe_layers) > 0, "moe_layers must be non-empty", fieldname="moe_layers")
        _require(all(b > a for a, b in zip(self.moe_layers, self.moe_layers[1:])),
                 "moe_layers must be strictly increasing", fieldname="moe_layers")
        _require(len(self.languages) > 0, "languages must be non-empty", fieldname="languages")
        _require(len(set(self.languages)) == len(self.languages),
                 "language tags must be unique", fieldname="languages")
        _require(self.capture_mode in CAPTURE_MODES,
                 f"unknown capture_mode '{self.capture_mode}'", fieldname="capture_mode")
        _require(self.prob_basis in (PROB_BASIS_FULL, PROB_BASIS_TOPK),
                 f"unknown prob_basis '{self.prob_basis}'", fieldname="prob_basis")
        if self.capture_mode == TOKEN_TOPK_ONLY:
            _require(self.prob_basis == PROB_BASIS_TOPK,
                     "token_topk_only traces must declare prob_basis 'topk_only'",
                     fieldname="prob_basis")
        return self

    def to_dict(self) -> dict:
        d = {
            "model_id": self.model_id,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "moe_layers": list(self.moe_layers),
            "languages": list(self.languages),
            "capture_mode": self.capture_mode,
            "tokenizer_id": self.tokenizer_id,
            "created_at": self.created_at,
        }
        if self.note:
            d["note"] = self.note
        if self.prob_basis != PROB_BASIS_FULL:
            d["prob_basis"] = self.prob_basis
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TraceMeta":
        try:
            basis = d.get("prob_basis")
            if basis is None:
                basis = PROB_BASIS_TOPK if d["capture_mode"] == TOKEN_TOPK_ONLY else PROB_BASIS_FULL
            meta = cls(
                model_id=str(d["model_id"]),
                num_experts=int(d["num_experts"]),
                top_k=int(d["top_k"]),
                moe_layers=tuple(d["moe_layers"]),
                languages=tuple(d["languages"]),
                capture_mode=str(d["capture_mode"]),
                tokenizer_id=str(d.get("tokenizer_id", "")),
                created_at=str(d.get("created_at", _EPOCH)),
                note=str(d.get("note", "")),
                prob_basis=str(basis),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"malformed header: {exc}") from exc
        return meta.validate()


def topk_of_probs(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, descending value, ties to lower id."""
    probs = np.asarray(probs)
    n = probs.shape[-1]
    if k >= n:
        order = np.argsort(-probs, kind="stable")
        return order[..., :k]
    if probs.ndim == 1:
        order = np.argsort(-probs, kind="stable")
        return order[:k]
    return _topk_rows(probs, k)


def _topk_set_rows(p: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k ids of a (T, N) matrix, unordered within each row.

    Fast path partitions out the k+1 largest values: the selection is
    ambiguous iff the k-th and (k+1)-th largest are equal (anything outside
    the candidates is <= the (k+1)-th). Ambiguous rows fall back to a stable
    full sort so the (value desc, id asc) policy holds exactly (ties at zero
    are common for concentrated routing laws).
    """
    t, n = p.shape
    if k >= n:
        return np.tile(np.arange(n), (t, 1))
    cand = np.argpartition(p, n - k - 1, axis=1)[:, n - k - 1:]
    vals = np.take_along_axis(p, cand, axis=1)
    two_smallest = np.partition(vals, 1, axis=1)[:, :2]
    drop = np.argmin(vals, axis=1)
    keep = np.ones((t, k + 1), dtype=bool)
    keep[np.arange(t), drop] = False
    part = cand[keep].reshape(t, k)
    for r in np.nonzero(two_smallest[:, 0] == two_smallest[:, 1])[0]:
        part[r] = np.argsort(-p[r], kind="stable")[:k]
    return part


def _topk_rows(p: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k with exact (value desc, id asc) ordering per row."""
    part = _topk_set_rows(p, k)
    # Sort ids ascending first; a stable sort on negated values then keeps
    # ascending-id order among equal values.
    part.sort(axis=1)
    vals = np.take_along_axis(p, part, axis=1)
    inner = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(part, inner, axis=1)


@dataclass(frozen=True)
class TokenRouting:
    """One token's routing observation at one MoE layer."""

    chunk_id: int
    token_index: int
    layer: int
    language: str
    is_content: bool
    topk_experts: tuple[int, ...]
    topk_probs: tuple[float, ...]
    full_probs: Optional[tuple[float, ...]] = None

    def validate(self, meta: TraceMeta, *, record: Optional[int] = None) -> "TokenRouting":
        n, k = meta.num_experts, meta.top_k
        _require(self.chunk_id >= 0, "chunk_id must be non-negative",
                 record=record, fieldname="chunk_id")
        _require(self.token_index >= 0, "token_index must be non-negative",
                 record=record, fieldname="token_index")
        _require(self.layer in meta.moe_layers,
                 f"layer {self.layer} not in moe_layers", record=record, fieldname="layer")
        _require(self.language in meta.languages,
                 f"language '{self.language}' not declared in header",
                 record=record, fieldname="language")
        _require(len(self.topk_experts) == k,
                 f"expected {k} top-k experts, got {len(self.topk_experts)}",
                 record=record, fieldname="topk_experts")
        seen = set()
        for e in self.topk_experts:
            _require(0 <= e < n, f"expert id {e} out of range [0, {n})",
                     record=record, fieldname="topk_experts")
            _require(e not in seen, f"duplicate expert id {e} in topk_experts",
                     record=record, fieldname="topk_experts", rule="no-duplicates")
            seen.add(e)
        _require(len(self.topk_probs) == k,
                 f"expected {k} top-k probabilities, got {len(self.topk_probs)}",
                 record=record, fieldname="topk_probs")
        for p in self.topk_probs:
            _require(0.0 <= p <= 1.0, f"probability {p} outside [0, 1]",
                     record=record, fieldname="topk_probs")
        if meta.capture_mode == TOKEN_FULL_PROBS:
            _require(self.full_probs is not None,
                     "capture_mode mismatch: header declares token_full_probs "
                     "but record has no full_probs",
                     record=record, fieldname="full_probs", rule="capture-mode")
        elif meta.capture_mode == TOKEN_TOPK_ONLY:
            _require(self.full_probs is None,
                     "capture_mode mismatch: header declares token_topk_only "
                     "but record carries full_probs",
                     record=record, fieldname="full_probs", rule="capture-mode")
        else:
            raise TraceValidationError(
                "capture_mode mismatch: token record in a chunk_aggregate trace",
                record=record, rule="capture-mode")
        if self.full_probs is not None:
            fp = np.asarray(self.full_probs, dtype=np.float64)
            _require(fp.shape == (n,),
                     f"full_probs must have length {n}, got {fp.shape[0]}",
                     record=record, fieldname="full_probs")
            _require(bool(np.all((fp >= 0.0) & (fp <= 1.0))),
                     "full_probs entry outside [0, 1]", record=record, fieldname="full_probs")
            mass = float(math.fsum(fp))
            _require(abs(mass - 1.0) <= TOKEN_PROB_MASS_TOL,
                     f"probability mass out of tolerance: full_probs sum to {mass:.6f}",
                     record=record, fieldname="full_probs", rule="prob-mass")
            expect = topk_of_probs(fp, k)
            got = np.asarray(self.topk_experts)
            _require(bool(np.array_equal(expect, got)),
                     f"topk_experts {list(got)} do not match the {k} largest "
                     f"full_probs entries {list(expect)} (ties break to lower id)",
                     record=record, fieldname="topk_experts", rule="topk-consistency")
            tp = np.asarray(self.topk_probs, dtype=np.float64)
            _require(bool(np.array_equal(tp, fp[expect])),
                     "topk_probs do not equal the corresponding full_probs entries",
                     record=record, fieldname="topk_probs", rule="topk-consistency")
        return self

    def to_dict(self) -> dict:
        d = {
            "chunk_id": self.chunk_id,
            "token_index": self.token_index,
            "layer": self.layer,
            "language": self.language,
            "is_content": self.is_content,
            "topk_experts": list(self.topk_experts),
            "topk_probs": list(self.topk_probs),
        }
        if self.full_probs is not None:
            d["full_probs"] = list(self.full_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict, *, record: Optional[int] = None) -> "TokenRouting":
        try:
            fp = d.get("full_probs")
            return cls(
                chunk_id=int(d["chunk_id"]),
                token_index=int(d["token_index"]),
                layer=int(d["layer"]),
                language=str(d["language"]),
                is_content=bool(d["is_content"]),
                topk_experts=tuple(int(x) for x in d["topk_experts"]),
                topk_probs=tuple(float(x) for x in d["topk_probs"]),
                full_probs=None if fp is None else tuple(float(x) for x in fp),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"record {record}: malformed token record: {exc}") from exc


@dataclass(frozen=True)
class ChunkAggregate:
    """Per-chunk, per-layer, per-language sufficient statistics."""

    chunk_id: int
    language: str
    layer: int
    content_token_count: int
    selection_counts: tuple[int, ...]
    prob_sums: tuple[float, ...]
    char_count: int = 0
    segment_count: int = 0

    def validate(self, meta: TraceMeta, *, record: Optional[int] = None) -> "ChunkAggregate":
        n, k = meta.num_experts, meta.top_k
        t = self.content_token_count
        _require(self.chunk_id >= 0, "chunk_id must be non-negative",
                 record=record, fieldname="chunk_id")
        _require(self.layer in meta.moe_layers,
                 f"layer {self.layer} not in moe_layers", record=record, fieldname="layer")
        _require(self.language in meta.languages,
                 f"language '{self.language}' not declared in header",
                 record=record, fieldname="language")
        _require(t >= 0, "content_token_count must be non-negative",
                 record=record, fieldname="content_token_count")
        _require(len(self.selection_counts) == n,
                 f"selection_counts must have length {n}",
                 record=record, fieldname="selection_counts")
        counts = np.asarray(self.selection_counts, dtype=np.int64)
        _require(bool(np.all(counts >= 0)), "selection_counts entry negative",
                 record=record, fieldname="selection_counts")
        _require(bool(np.all(counts <= t)),
                 "selection_counts entry exceeds content_token_count",
                 record=record, fieldname="selection_counts")
        total = int(counts.sum())
        _require(total == k * t,
                 f"sum(selection_counts) = {total}, expected top_k x tokens = {k * t}",
                 record=record, fieldname="selection_counts", rule="selection-conservation")
        _require(len(self.prob_sums) == n, f"prob_sums must have length {n}",
                 record=record, fieldname="prob_sums")
        ps = np.asarray(self.prob_sums, dtype=np.float64)
        _require(bool(np.all((ps >= 0.0) & (ps <= t + 1e-9))),
                 "prob_sums entry outside [0, content_token_count]",
                 record=record, fieldname="prob_sums")
        mass = float(math.fsum(ps))
        if t > 0:
            if meta.prob_basis == PROB_BASIS_FULL:
                _require(abs(mass / t - 1.0) <= CHUNK_PROB_MASS_REL_TOL,
                         f"probability mass out of tolerance: prob_sums total {mass:.6f} "
                         f"for {t} tokens",
                         record=record, fieldname="prob_sums", rule="prob-mass")
            else:
                # Top-k-only basis: mass below 1 per token is expected (lossy).
                _require(mass / t <= 1.0 + CHUNK_PROB_MASS_REL_TOL,
                         f"probability mass out of tolerance: prob_sums total {mass:.6f} "
                         f"exceeds {t} tokens",
                         record=record, fieldname="prob_sums", rule="prob-mass")
        else:
            _require(mass == 0.0, "prob_sums must be zero for an empty chunk",
                     record=record, fieldname="prob_sums")
        _require(self.char_count >= 0, "char_count must be non-negative",
                 record=record, fieldname="char_count")
        _require(self.segment_count >= 0, "segment_count must be non-negative",
                 record=record, fieldname="segment_count")
        return self

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "language": self.language,
            "layer": self.layer,
            "content_token_count": self.content_token_count,
            "selection_counts": list(self.selection_counts),
            "prob_sums": list(self.prob_sums),
            "char_count": self.char_count,
            "segment_count": self.segment_count,
        }

    @classmethod
    def from_dict(cls, d: dict, *, record: Optional[int] = None) -> "ChunkAggregate":
        try:
            return cls(
                chunk_id=int(d["chunk_id"]),
                language=str(d["language"]),
                layer=int(d["layer"]),
                content_token_count=int(d["content_token_count"]),
                selection_counts=tuple(int(x) for x in d["selection_counts"]),
                prob_sums=tuple(float(x) for x in d["prob_sums"]),
                char_count=int(d.get("char_count", 0)),
                segment_count=int(d.get("segment_count", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(f"record {record}: malformed chunk row: {exc}") from exc


@dataclass(frozen=True)
class LayerLanguageProfile:
    """Finalized per-layer, per-language expert utilization."""

    layer: int
    language: str
    token_count: int
    counts: np.ndarray
    activation_rate: np.ndarray
    mean_prob: np.ndarray
    per_chunk_metrics: tuple = ()  # (chunk_id, token_count, usage_entropy, gini)
    prob_basis: str = PROB_BASIS_FULL

    @property
    def empty(self) -> bool:
        return self.token_count == 0


def quantize_probs(probs: np.ndarray, sig_digits: int = 4) -> np.ndarray:
    """Round probabilities to ``sig_digits`` significant decimal digits.

    Rounding is monotone, so top-k extraction before and after quantization
    selects the same experts (up to documented tie-breaking).
    """
    p = np.asarray(probs, dtype=np.float64)
    out = np.zeros_like(p)
    nz = p != 0.0
    if np.any(nz):
        mag = np.floor(np.log10(np.abs(p[nz])))
        scale = 10.0 ** (sig_digits - 1 - mag)
        out[nz] = np.round(p[nz] * scale) / scale
    return out


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_token_trace(path, meta: TraceMeta, records: Iterable[TokenRouting],
                      sig_digits: Optional[int] = None) -> int:
    """Write a token-level trace; returns the number of records written.

    ``sig_digits`` optionally quantizes probabilities (4 significant digits
    keeps per-token mass drift within the 1e-4 tolerance). Top-k lists are
    re-derived from the quantized vector so the stored record stays
    self-consistent.
    """
    meta.validate()
    count = 0
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_dumps({"meta": meta.to_dict()}) + "\n")
        for rec in records:
            if sig_digits is not None and rec.full_probs is not None:
                fp = quantize_probs(np.asarray(rec.full_probs), sig_digits)
                ids = topk_of_probs(fp, meta.top_k)
                rec = replace(rec,
                              full_probs=tuple(float(x) for x in fp),
                              topk_experts=tuple(int(i) for i in ids),
                              topk_probs=tuple(float(fp[i]) for i in ids))
            fh.write(_dumps(rec.to_dict()) + "\n")
            count += 1
    os.replace(tmp, path)
    return count


def write_chunk_trace(path, meta: TraceMeta, chunks: Sequence[ChunkAggregate]) -> int:
    """Write a chunk-aggregate trace ordered by (language, chunk_id, layer)."""
    meta.validate()
    rows = sorted(chunks, key=lambda c: (c.language, c.chunk_id, c.layer))
    doc = {"meta": meta.to_dict(), "chunks": [c.to_dict() for c in rows]}
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_dumps(doc))
        fh.write("\n")
    os.replace(tmp, path)
    return len(rows)


# ---------------------------------------------------------------------------
# Readers
# ---------------------------------------------------------------------------

def _read_header_line(fh, path) -> TraceMeta:
    line = fh.readline()
    if not line:
        raise TraceFormatError(f"{path}: empty file, expected a meta header line")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(obj, dict) or "meta" not in obj:
        raise TraceFormatError(f"{path}: malformed header: first line must be a "
                               "JSON object with a 'meta' key")
    return TraceMeta.from_dict(obj["meta"])


def read_trace(path):
    """Open a trace file; returns ``(meta, records)``.

    ``records`` is an iterator of validated :class:`TokenRouting` (token
    modes) or :class:`ChunkAggregate` (chunk_aggregate mode) in file order.
    Validation failures raise during iteration with the offending record
    number, field, and rule.
    """
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        head = fh.readline()
    if not head.strip():
        raise TraceFormatError(f"{path}: empty file, expected a meta header")
    if not head.lstrip().startswith("{"):
        raise TraceFormatError(f"{path}: malformed header: file does not start "
                               "with a JSON object")
    try:
        header_obj = json.loads(head)
        header_is_line = isinstance(header_obj, dict)
    except json.JSONDecodeError:
        header_is_line = False

    if header_is_line and "chunks" not in header_obj:
        # Line-delimited token trace: first line is the {"meta": ...} header.
        meta = TraceMeta.from_dict(_expect_meta(header_obj, path))
        if meta.capture_mode == CHUNK_AGGREGATE:
            raise TraceValidationError(
                "capture_mode mismatch: chunk_aggregate header in a line-delimited "
                "token trace; expected a single-document file")
        return meta, _iter_token_records(path, meta, skip_bytes=len(head.encode("utf-8")))
    # Single-document chunk-aggregate trace (one line or pretty-printed).
    return _read_chunk_document(path)


def _expect_meta(obj, path) -> dict:
    if not isinstance(obj, dict) or "meta" not in obj:
        raise TraceFormatError(f"{path}: malformed header: first line must be a "
                               "JSON object with a 'meta' key")
    return obj["meta"]


def _iter_token_records(path, meta: TraceMeta, *, skip_bytes: int) -> Iterator[TokenRouting]:
    offset = skip_bytes
    with open(path, "r", encoding="utf-8") as fh:
        fh.seek(skip_bytes)
        record_no = 0
        for line in fh:
            nbytes = len(line.encode("utf-8"))
            record_no += 1
            stripped = line.strip()
            if not stripped:
                offset += nbytes
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                if not line.endswith("\n"):
                    raise TraceFormatError(
                        f"{path}: unexpected end of stream at byte {offset + nbytes}") from exc
                raise TraceFormatError(
                    f"{path}: record {record_no}: malformed record: {exc}") from exc
            yield TokenRouting.from_dict(obj, record=record_no).validate(meta, record=record_no)
            offset += nbytes


def _read_chunk_document(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    text = raw.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        # A document that fails to parse and does not close its top-level
        # object was cut off mid-write.
        if not text.rstrip().endswith("}") or exc.pos >= len(text.rstrip()) - 1:
            raise TraceFormatError(
                f"{path}: unexpected end of stream at byte {len(raw)}") from exc
        raise TraceFormatError(f"{path}: malformed document: {exc}") from exc
    meta = TraceMeta.from_dict(_expect_meta(doc, path))
    if meta.capture_mode != CHUNK_AGGREGATE:
        raise TraceValidationError(
            "capture_mode mismatch: token-mode header in a chunk-aggregate document")
    rows = doc.get("chunks")
    if not isinstance(rows, list):
        raise TraceFormatError(f"{path}: malformed document: missing 'chunks' array")

    def gen():
        seen = set()
        for i, row in enumerate(rows, start=1):
            chunk = ChunkAggregate.from_dict(row, record=i).validate(meta, record=i)
            key = (chunk.language, chunk.chunk_id, chunk.layer)
            if key in seen:
                raise TraceValidationError(
                    f"duplicate chunk row for language='{key[0]}' chunk_id={key[1]} "
                    f"layer={key[2]}", record=i, rule="unique-chunk-rows")
            seen.add(key)
            yield chunk

    return meta, gen()


# ---------------------------------------------------------------------------
# Token aggregation
# ---------------------------------------------------------------------------

@dataclass
class _ChunkAccum:
    counts: np.ndarray
    prob_sums: np.ndarray
    tokens: int = 0


def aggregate_tokens(records: Iterable[TokenRouting], meta: TraceMeta,
                     tokenization: Optional[dict] = None) -> list[ChunkAggregate]:
    """Fold token records into per-(language, chunk, layer) aggregates.

    Non-content tokens are excluded entirely. With full probability vectors,
    ``prob_sums`` accumulates the complete softmax mass; with top-k-only
    records only the selected experts' probabilities contribute (lossy; the
    meta's ``prob_basis`` flags this downstream).

    ``tokenization`` optionally maps ``(language, chunk_id)`` to
    ``(char_count, segment_count)`` pairs, e.g. from a capture sidecar.
    """
    n = meta.num_experts
    groups: dict[tuple[str, int, int], _ChunkAccum] = {}
    for rec in records:
        if not rec.is_content:
            continue
        key = (rec.language, rec.chunk_id, rec.layer)
        acc = groups.get(key)
        if acc is None:
            acc = _ChunkAccum(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.float64))
            groups[key] = acc
        acc.tokens += 1
        for e in rec.topk_experts:
            acc.counts[e] += 1
        if rec.full_probs is not None:
            acc.prob_sums += np.asarray(rec.full_probs, dtype=np.float64)
        else:
            for e, p in zip(rec.topk_experts, rec.topk_probs):
                acc.prob_sums[e] += p

    out = []
    for (language, chunk_id, layer) in sorted(groups):
        acc = groups[(language, chunk_id, layer)]
        chars, segments = 0, 0
        if tokenization is not None:
            chars, segments = tokenization.get((language, chunk_id), (0, 0))
        out.append(ChunkAggregate(
            chunk_id=chunk_id,
            language=language,
            layer=layer,
            content_token_count=acc.tokens,
            selection_counts=tuple(int(x) for x in acc.counts),
            prob_sums=tuple(float(x) for x in acc.prob_sums),
            char_count=int(chars),
            segment_count=int(segments),
        ).validate(meta))
    return out


def read_tokenization_sidecar(path) -> dict[tuple[str, int], tuple[int, int]]:
    """Load a per-chunk tokenization-count sidecar.

    Format: ``{"counts": [{"language", "chunk_id", "token_count",
    "char_count", "segment_count"}, ...]}``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = {}
    for row in doc.get("counts", []):
        out[(str(row["language"]), int(row["chunk_id"]))] = (
            int(row["char_count"]), int(row["segment_count"]))
    return out


def write_tokenization_sidecar(path, rows: Sequence[dict]) -> None:
    rows = sorted(rows, key=lambda r: (r["language"], r["chunk_id"]))
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_dumps({"counts": rows}))
        fh.write("\n")
    os.replace(tmp, path)


def convert_to_aggregate_file(token_trace, out, sidecar=None) -> dict:
    """Convert a token-level trace file to a chunk-aggregate file.

    Output rows are ordered by (language, chunk_id, layer). Returns a summary
    ``{"chunks", "tokens", "bytes"}``.
    """
    meta, records = read_trace(token_trace)
    if meta.capture_mode == CHUNK_AGGREGATE:
        raise TraceValidationError("input is already a chunk-aggregate trace")
    tokenization = read_tokenization_sidecar(sidecar) if sidecar else None
    chunks = aggregate_tokens(records, meta, tokenization=tokenization)
    basis = PROB_BASIS_TOPK if meta.capture_mode == TOKEN_TOPK_ONLY else meta.prob_basis
    out_meta = replace(meta, capture_mode=CHUNK_AGGREGATE, prob_basis=basis)
    write_chunk_trace(out, out_meta, chunks)
    tokens = 0
    seen = set()
    for c in chunks:
        if (c.language, c.chunk_id) not in seen:
            seen.add((c.language, c.chunk_id))
            tokens += c.content_token_count
    return {"chunks": len(chunks), "tokens": tokens, "bytes": os.path.getsize(out)}
