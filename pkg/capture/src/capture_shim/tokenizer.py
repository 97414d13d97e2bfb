"""Deterministic word-hash tokenizer for the toy fixture.

Words map to stable ids via CRC32, so identical text tokenizes identically
across runs and platforms. The literal strings "<pad>", "<bos>", "<eos>"
map to the special ids, which lets tests inject maskable tokens straight
into corpus text.
"""

from __future__ import annotations

import zlib

from .model import BOS_ID, EOS_ID, PAD_ID, TOY_VOCAB, UNK_ID

TOKENIZER_ID = "toy-wordhash-v1"

_SPECIAL_WORDS = {"<pad>": PAD_ID, "<bos>": BOS_ID, "<eos>": EOS_ID, "<unk>": UNK_ID}
_FIRST_WORD_ID = 4


def word_id(word: str, vocab: int = TOY_VOCAB) -> int:
    special = _SPECIAL_WORDS.get(word)
    if special is not None:
        return special
    span = vocab - _FIRST_WORD_ID
    return _FIRST_WORD_ID + zlib.crc32(word.encode("utf-8")) % span


def encode(text: str, vocab: int = TOY_VOCAB, add_markers: bool = True) -> list[int]:
    """Tokenize whitespace-split words; wraps with BOS/EOS by default."""
    ids = [word_id(w, vocab) for w in text.split()]
    if add_markers:
        return [BOS_ID] + ids + [EOS_ID]
    return ids
