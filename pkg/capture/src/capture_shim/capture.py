"""Router-logit capture via forward hooks.

Each language is processed in separate forward passes. Hooks on the gate
modules intercept the hidden states entering each gate, recompute the
router logits through the gate's own linear projection, and softmax them
over all experts. Special tokens (padding, sequence markers, anything in
the configured mask set) contribute no records.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .chunking import chunk_corpus
from .model import TOY_GATE_PATTERN, TOY_SPECIAL_IDS, make_toy_model
from .tokenizer import TOKENIZER_ID, encode
from .writer import (TOKEN_FULL_PROBS, TOKEN_TOPK_ONLY, TraceWriter, meta_dict,
                     write_sidecar)


class GateLocatorError(ValueError):
    """The gate pattern did not resolve to exactly one gate per MoE layer."""


def locate_gates(model: torch.nn.Module, pattern: str) -> dict[int, torch.nn.Module]:
    """Map layer index -> gate module via a regex with one capture group."""
    rx = re.compile(pattern)
    found: dict[int, list] = {}
    for name, module in model.named_modules():
        m = rx.fullmatch(name)
        if m is None:
            continue
        if not m.groups():
            raise GateLocatorError(
                f"pattern '{pattern}' needs a capture group for the layer index")
        layer = int(m.group(1))
        found.setdefault(layer, []).append((name, module))
    if not found:
        raise GateLocatorError(f"pattern '{pattern}' matched no modules")
    for layer, hits in found.items():
        if len(hits) != 1:
            names = [n for n, _ in hits]
            raise GateLocatorError(
                f"gate locator ambiguity: layer {layer} matched {names}")
    return {layer: hits[0][1] for layer, hits in sorted(found.items())}


@dataclass
class CaptureConfig:
    """Capture-run settings; see README for the JSON file layout."""

    model: dict
    languages: dict                     # language tag -> corpus path
    output: str
    gate_pattern: str = TOY_GATE_PATTERN
    target_words: int = 300
    batch_size: int = 8
    capture_mode: str = TOKEN_FULL_PROBS
    special_token_ids: tuple = TOY_SPECIAL_IDS
    sidecar: Optional[str] = None
    created_at: str = "1970-01-01T00:00:00Z"
    note: str = ""
    expect_num_experts: Optional[int] = None
    expect_top_k: Optional[int] = None

    @classmethod
    def load(cls, path) -> "CaptureConfig":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(
            model=d["model"],
            languages=dict(d["languages"]),
            output=d["output"],
            gate_pattern=d.get("gate_pattern", TOY_GATE_PATTERN),
            target_words=int(d.get("target_words", 300)),
            batch_size=int(d.get("batch_size", 8)),
            capture_mode=d.get("capture_mode", TOKEN_FULL_PROBS),
            special_token_ids=tuple(d.get("special_token_ids", TOY_SPECIAL_IDS)),
            sidecar=d.get("sidecar"),
            created_at=d.get("created_at", "1970-01-01T00:00:00Z"),
            note=d.get("note", ""),
            expect_num_experts=d.get("expect_num_experts"),
            expect_top_k=d.get("expect_top_k"),
        )

    def validate(self) -> "CaptureConfig":
        if self.capture_mode not in (TOKEN_FULL_PROBS, TOKEN_TOPK_ONLY):
            raise ValueError(f"unknown capture_mode '{self.capture_mode}'")
        if not self.languages:
            raise ValueError("at least one language corpus is required")
        if self.target_words < 1 or self.batch_size < 1:
            raise ValueError("target_words and batch_size must be positive")
        return self


def load_model(spec: dict):
    """Build or load the model named by a config's model reference."""
    kind = spec.get("kind", "toy")
    if kind == "toy":
        model = make_toy_model(num_layers=int(spec["num_layers"]),
                               num_experts=int(spec["num_experts"]),
                               top_k=int(spec["top_k"]),
                               seed=int(spec.get("seed", 0)),
                               hybrid=bool(spec.get("hybrid", False)))
        model_id = (f"toy-moe-L{spec['num_layers']}-N{spec['num_experts']}"
                    f"-K{spec['top_k']}-seed{spec.get('seed', 0)}")
        return model, model_id, model.num_experts, model.top_k
    if kind == "hf":
        from transformers import AutoModelForCausalLM
        model = AutoModelForCausalLM.from_pretrained(spec["id"])
        model.eval()
        cfg = model.config
        n = getattr(cfg, "num_experts", None) or getattr(cfg, "n_routed_experts", None)
        k = getattr(cfg, "num_experts_per_tok", None) or getattr(cfg, "moe_top_k", None)
        if n is None or k is None:
            raise ValueError("cannot infer expert count / top-k from the model config; "
                             "set expect_num_experts and expect_top_k")
        return model, str(spec["id"]), int(n), int(k)
    raise ValueError(f"unknown model kind '{kind}'")


class _GateTap:
    """Forward hook capturing softmax router probabilities per gate call."""

    def __init__(self, gate: torch.nn.Module):
        self.gate = gate
        self.probs: Optional[torch.Tensor] = None
        self._handle = gate.register_forward_pre_hook(self._hook)

    def _hook(self, module, args):
        hidden = args[0]
        with torch.no_grad():
            logits = torch.nn.functional.linear(hidden, module.weight,
                                                getattr(module, "bias", None))
            self.probs = torch.softmax(logits.float(), dim=-1)

    def remove(self):
        self._handle.remove()


@dataclass(frozen=True)
class EncodedChunk:
    language: str
    chunk_id: int
    token_ids: tuple
    char_count: int = 0
    segment_count: int = 0


def capture_encoded(model, chunks: Sequence[EncodedChunk], writer: TraceWriter,
                    gate_pattern: str, special_token_ids, batch_size: int = 8,
                    pad_id: int = 0) -> dict:
    """Run encoded chunks through the model and write routing records.

    Returns per-(language, chunk_id) content token counts. Chunks are
    grouped into padded batches; every non-special position of every chunk
    yields one record per MoE layer.
    """
    gates = locate_gates(model, gate_pattern)
    taps = {layer: _GateTap(gate) for layer, gate in gates.items()}
    special = set(int(x) for x in special_token_ids)
    content_counts: dict[tuple, int] = {}
    try:
        for lo in range(0, len(chunks), batch_size):
            batch = chunks[lo:lo + batch_size]
            width = max(len(c.token_ids) for c in batch)
            ids = torch.full((len(batch), width), pad_id, dtype=torch.long)
            for row, chunk in enumerate(batch):
                ids[row, :len(chunk.token_ids)] = torch.tensor(chunk.token_ids)
            with torch.no_grad():
                model(ids)
            for layer in sorted(taps):
                probs = taps[layer].probs
                if probs is None:
                    raise RuntimeError(f"gate at layer {layer} did not fire")
                arr = probs.numpy().astype(np.float64)
                for row, chunk in enumerate(batch):
                    key = (chunk.language, chunk.chunk_id)
                    for pos, token_id in enumerate(chunk.token_ids):
                        if token_id in special:
                            continue
                        writer.write_token(chunk.chunk_id, pos, layer,
                                           chunk.language, arr[row, pos])
                        if layer == min(taps):
                            content_counts[key] = content_counts.get(key, 0) + 1
            for chunk in batch:
                content_counts.setdefault((chunk.language, chunk.chunk_id), 0)
    finally:
        for tap in taps.values():
            tap.remove()
    return content_counts


def capture(config: CaptureConfig) -> dict:
    """Full pipeline: corpora -> chunks -> forward passes -> trace + sidecar."""
    config.validate()
    model, model_id, num_experts, top_k = load_model(config.model)
    if config.expect_num_experts is not None and config.expect_num_experts != num_experts:
        raise ValueError(f"expert-count mismatch: config expects "
                         f"{config.expect_num_experts}, model has {num_experts}")
    if config.expect_top_k is not None and config.expect_top_k != top_k:
        raise ValueError(f"K mismatch: config expects top-{config.expect_top_k}, "
                         f"model routes top-{top_k}")
    gates = locate_gates(model, config.gate_pattern)

    encoded: list[EncodedChunk] = []
    for language in sorted(config.languages):
        with open(config.languages[language], "r", encoding="utf-8") as fh:
            text = fh.read()
        for chunk in chunk_corpus(text, config.target_words):
            encoded.append(EncodedChunk(
                language=language, chunk_id=chunk.index,
                token_ids=tuple(encode(chunk.text)),
                char_count=chunk.char_count, segment_count=chunk.segment_count))

    meta = meta_dict(model_id=model_id, num_experts=num_experts, top_k=top_k,
                     moe_layers=sorted(gates), languages=sorted(config.languages),
                     capture_mode=config.capture_mode, tokenizer_id=TOKENIZER_ID,
                     created_at=config.created_at, note=config.note)
    with TraceWriter(config.output, meta) as writer:
        # languages stay in separate forward passes: chunks are already
        # grouped by language (sorted), and batches never span languages
        counts = {}
        for language in sorted(config.languages):
            lang_chunks = [c for c in encoded if c.language == language]
            counts.update(capture_encoded(
                model, lang_chunks, writer, config.gate_pattern,
                config.special_token_ids, config.batch_size))
        records = writer.records

    sidecar_rows = []
    by_key = {(c.language, c.chunk_id): c for c in encoded}
    for (language, chunk_id), tokens in sorted(counts.items()):
        chunk = by_key[(language, chunk_id)]
        sidecar_rows.append({
            "language": language, "chunk_id": chunk_id, "token_count": tokens,
            "char_count": chunk.char_count, "segment_count": chunk.segment_count,
        })
    if config.sidecar:
        write_sidecar(config.sidecar, sidecar_rows)

    return {
        "output": config.output,
        "sidecar": config.sidecar,
        "records": records,
        "chunks": len(encoded),
        "languages": sorted(config.languages),
        "moe_layers": sorted(gates),
        "content_tokens": {lang: sum(v for (l, _), v in counts.items() if l == lang)
                           for lang in sorted(config.languages)},
    }
