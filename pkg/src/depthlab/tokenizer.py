"""Byte-level tokenizer: ids 0..255 are raw bytes, plus BOS/EOS/PAD specials.
Avoids any external vocabulary asset at desk scale."""

from __future__ import annotations

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259
TOKENIZER_ID = "byte-v1"


def encode(text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    ids = list(text.encode("utf-8"))
    if add_bos:
        ids = [BOS] + ids
    if add_eos:
        ids = ids + [EOS]
    return ids


def decode(ids: list[int]) -> str:
    raw = bytes(i for i in ids if i < 256)
    return raw.decode("utf-8", errors="replace")
