"""capture_shim: forward-hook MoE router-trace capture.

Runs parallel corpora through an MoE checkpoint in separate per-language
forward passes, intercepts router logits at every MoE layer, and writes
traces in the routelens on-disk format (plus a tokenization-count sidecar).
Ships a seeded toy MoE for desk-scale end-to-end tests.
"""

from .capture import (CaptureConfig, EncodedChunk, GateLocatorError, capture,
                      capture_encoded, load_model, locate_gates)
from .chunking import CorpusChunk, chunk_corpus
from .model import (HYBRID_STYLE_GATE_PATTERN, QWEN_STYLE_GATE_PATTERN,
                    TOY_GATE_PATTERN, TOY_SPECIAL_IDS, make_toy_model)
from .tokenizer import encode, word_id
from .writer import TraceWriter, meta_dict, write_sidecar

__version__ = "0.1.0"

__all__ = [
    "CaptureConfig", "CorpusChunk", "EncodedChunk", "GateLocatorError",
    "HYBRID_STYLE_GATE_PATTERN", "QWEN_STYLE_GATE_PATTERN", "TOY_GATE_PATTERN",
    "TOY_SPECIAL_IDS", "TraceWriter", "capture", "capture_encoded",
    "chunk_corpus", "encode", "load_model", "locate_gates", "make_toy_model",
    "meta_dict", "word_id", "write_sidecar",
]
