"""Corpus chunking with exact character and segment counts.

Chunks hold a fixed number of whitespace-delimited segments (default 300,
inside the 250-350 band) except for the final remainder. A segment longer
than 6x the word target (whitespace-free scripts) is split by that
character budget instead, one chunk per piece with segment_count = 1.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CorpusChunk:
    index: int
    text: str
    word_count: int

    @property
    def char_count(self) -> int:
        return len(self.text)

    @property
    def segment_count(self) -> int:
        return self.word_count


def chunk_corpus(text: str, target_words: int = 300) -> list[CorpusChunk]:
    if target_words < 1:
        raise ValueError("target_words must be positive")
    segments = text.split()
    if not segments:
        raise ValueError("empty input: no whitespace-delimited segments")
    char_budget = 6 * target_words
    chunks: list[CorpusChunk] = []
    current: list[str] = []

    def flush():
        if current:
            chunks.append(CorpusChunk(index=len(chunks), text=" ".join(current),
                                      word_count=len(current)))
            current.clear()

    for seg in segments:
        if len(seg) > char_budget:
            flush()
            for lo in range(0, len(seg), char_budget):
                piece = seg[lo:lo + char_budget]
                chunks.append(CorpusChunk(index=len(chunks), text=piece, word_count=1))
            continue
        current.append(seg)
        if len(current) == target_words:
            flush()
    flush()
    return chunks
