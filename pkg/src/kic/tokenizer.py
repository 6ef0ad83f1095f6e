"""Byte-level tokenizer with five reserved control ids.

Ids 0..4 are control tokens; raw bytes map to 5..260, so the full vocabulary
is 261. Encoding never emits control ids, which keeps the byte round trip
lossless.
"""

from __future__ import annotations

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
KNOW_ID = 3   # separates the input from retrieved knowledge
PIECE_ID = 4  # separates adjacent knowledge pieces

N_RESERVED = 5
BYTE_OFFSET = N_RESERVED
VOCAB_SIZE = 256 + N_RESERVED

RESERVED_IDS = (PAD_ID, BOS_ID, EOS_ID, KNOW_ID, PIECE_ID)


def encode_bytes(data: bytes) -> list[int]:
    return [BYTE_OFFSET + b for b in data]


def encode(text: str) -> list[int]:
    return encode_bytes(text.encode("utf-8"))


def decode_bytes(ids) -> bytes:
    """Inverse of encode_bytes; control ids are dropped, not errors."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if i < 0 or i >= VOCAB_SIZE:
            raise ValueError(f"token id {i} outside vocabulary of {VOCAB_SIZE}")
        if i >= BYTE_OFFSET:
            out.append(i - BYTE_OFFSET)
    return bytes(out)


def decode(ids) -> str:
    return decode_bytes(ids).decode("utf-8", errors="replace")
