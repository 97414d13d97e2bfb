import numpy as np
import pytest

from routelens.trace import (TOKEN_FULL_PROBS, ChunkAggregate, TokenRouting,
                             TraceMeta, topk_of_probs)


def make_meta(num_experts=8, top_k=2, layers=(0, 1), languages=("en", "he"),
              capture_mode=TOKEN_FULL_PROBS, **kw):
    return TraceMeta(
        model_id="test-model",
        num_experts=num_experts,
        top_k=top_k,
        moe_layers=tuple(layers),
        languages=tuple(languages),
        capture_mode=capture_mode,
        tokenizer_id="test-tok",
        **kw,
    ).validate()


def make_token(meta, probs, chunk_id=0, token_index=0, layer=None, language=None,
               is_content=True):
    """Build a consistent token record from a full probability vector."""
    probs = np.asarray(probs, dtype=np.float64)
    ids = topk_of_probs(probs, meta.top_k)
    return TokenRouting(
        chunk_id=chunk_id,
        token_index=token_index,
        layer=meta.moe_layers[0] if layer is None else layer,
        language=meta.languages[0] if language is None else language,
        is_content=is_content,
        topk_experts=tuple(int(i) for i in ids),
        topk_probs=tuple(float(probs[i]) for i in ids),
        full_probs=tuple(float(x) for x in probs),
    )


def make_chunk(meta, counts, prob_sums=None, chunk_id=0, layer=None, language=None,
               char_count=0, segment_count=0):
    """Build a valid chunk row; prob_sums defaults to counts scaled to mass T."""
    counts = np.asarray(counts, dtype=np.int64)
    tokens = int(counts.sum()) // meta.top_k
    if prob_sums is None:
        prob_sums = counts / meta.top_k  # proportional mass, sums to T exactly
    return ChunkAggregate(
        chunk_id=chunk_id,
        language=meta.languages[0] if language is None else language,
        layer=meta.moe_layers[0] if layer is None else layer,
        content_token_count=tokens,
        selection_counts=tuple(int(x) for x in counts),
        prob_sums=tuple(float(x) for x in prob_sums),
        char_count=char_count,
        segment_count=segment_count,
    ).validate(meta)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
