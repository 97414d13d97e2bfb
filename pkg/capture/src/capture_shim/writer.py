"""Trace-format writer.

Emits the routelens trace file formats directly (line-delimited token
records behind a ``{"meta": ...}`` header, plus the per-chunk tokenization
sidecar). The shim deliberately does not import routelens: the on-disk
format is the interface between the two packages.
"""

from __future__ import annotations

import json
import os

import numpy as np

TOKEN_FULL_PROBS = "token_full_probs"
TOKEN_TOPK_ONLY = "token_topk_only"

_EPOCH = "1970-01-01T00:00:00Z"


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def meta_dict(model_id: str, num_experts: int, top_k: int, moe_layers,
              languages, capture_mode: str, tokenizer_id: str,
              created_at: str = _EPOCH, note: str = "") -> dict:
    d = {
        "model_id": model_id,
        "num_experts": int(num_experts),
        "top_k": int(top_k),
        "moe_layers": [int(x) for x in moe_layers],
        "languages": list(languages),
        "capture_mode": capture_mode,
        "tokenizer_id": tokenizer_id,
        "created_at": created_at,
    }
    if note:
        d["note"] = note
    if capture_mode == TOKEN_TOPK_ONLY:
        d["prob_basis"] = "topk_only"
    return d


def topk_lower_id(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, descending value, ties to lower id."""
    return np.argsort(-probs, kind="stable")[:k]


class TraceWriter:
    """Append-only token-trace writer with atomic finalization."""

    def __init__(self, path, meta: dict):
        self.path = os.fspath(path)
        self._tmp = self.path + ".tmp"
        self._fh = open(self._tmp, "w", encoding="utf-8")
        self._fh.write(_dumps({"meta": meta}) + "\n")
        self._full = meta["capture_mode"] == TOKEN_FULL_PROBS
        self._k = meta["top_k"]
        self.records = 0

    def write_token(self, chunk_id: int, token_index: int, layer: int,
                    language: str, probs: np.ndarray):
        ids = topk_lower_id(probs, self._k)
        rec = {
            "chunk_id": chunk_id,
            "token_index": token_index,
            "layer": layer,
            "language": language,
            "is_content": True,
            "topk_experts": [int(i) for i in ids],
            "topk_probs": [float(probs[i]) for i in ids],
        }
        if self._full:
            rec["full_probs"] = [float(x) for x in probs]
        self._fh.write(_dumps(rec) + "\n")
        self.records += 1

    def close(self):
        if self._fh is not None:
            self._fh.close()
            os.replace(self._tmp, self.path)
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_sidecar(path, rows: list) -> None:
    """Per-chunk tokenization counts keyed by (language, chunk_id)."""
    rows = sorted(rows, key=lambda r: (r["language"], r["chunk_id"]))
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_dumps({"counts": rows}))
        fh.write("\n")
    os.replace(tmp, path)
