"""Byte round trip and the reserved control ids."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kic import tokenizer


def test_vocabulary_layout():
    assert tokenizer.RESERVED_IDS == (0, 1, 2, 3, 4)
    assert tokenizer.BYTE_OFFSET == 5
    assert tokenizer.VOCAB_SIZE == 261


@given(st.text())
def test_text_round_trip(text):
    assert tokenizer.decode(tokenizer.encode(text)) == text


@given(st.binary())
def test_byte_round_trip(data):
    assert tokenizer.decode_bytes(tokenizer.encode_bytes(data)) == data


@given(st.text(min_size=1))
def test_encode_never_emits_control_ids(text):
    assert min(tokenizer.encode(text)) >= tokenizer.BYTE_OFFSET


def test_decode_drops_control_ids():
    ids = [tokenizer.BOS_ID, *tokenizer.encode("hi"), tokenizer.KNOW_ID,
           *tokenizer.encode("!"), tokenizer.EOS_ID, tokenizer.PAD_ID]
    assert tokenizer.decode(ids) == "hi!"


def test_decode_rejects_out_of_range():
    for bad in (-1, tokenizer.VOCAB_SIZE):
        with pytest.raises(ValueError, match="outside vocabulary"):
            tokenizer.decode_bytes([bad])
