"""Hashed n-gram embedder against the independent oracle, plus the external
service client against a canned transport."""

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kic.embedding import (
    EXTERNAL_SERVICE,
    HASHED_NGRAM,
    EmbedderSpec,
    embed_batch,
    embed_text,
    external_embed,
    normalize_text,
)

from reference_oracles import hashed_ngram_vector

SPEC = EmbedderSpec(kind=HASHED_NGRAM, d=64, seed=3)


def test_matches_oracle_on_plain_words():
    for text in ("bird", "bird CapableOf fly", "the cat sat on the mat",
                 "ab", "x", "United States capital Washington D.C."):
        expected = hashed_ngram_vector(text, SPEC.ngram_min, SPEC.ngram_max,
                                       SPEC.d, SPEC.seed)
        np.testing.assert_array_equal(embed_text(text, SPEC), expected)


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet=st.characters(codec="utf-8"), min_size=1, max_size=40))
def test_matches_oracle_on_arbitrary_text(text):
    if not normalize_text(text):
        with pytest.raises(ValueError):
            embed_text(text, SPEC)
        return
    expected = hashed_ngram_vector(text, SPEC.ngram_min, SPEC.ngram_max,
                                   SPEC.d, SPEC.seed)
    np.testing.assert_array_equal(embed_text(text, SPEC), expected)


def test_unit_norm_unless_signs_cancel():
    vec = embed_text("some reasonable text", SPEC)
    assert vec.dtype == np.float64
    assert np.isclose(np.linalg.norm(vec), 1.0)


def test_case_and_whitespace_are_normalized_away():
    a = embed_text("Bird  CAN\tFly", SPEC)
    b = embed_text("bird can fly", SPEC)
    np.testing.assert_array_equal(a, b)


def test_different_seeds_give_different_vectors():
    a = embed_text("bird", EmbedderSpec(d=64, seed=0))
    b = embed_text("bird", EmbedderSpec(d=64, seed=1))
    assert not np.array_equal(a, b)


def test_short_text_hashes_whole_string():
    # below ngram_min the whole normalized text is the only feature
    vec = embed_text("ab", SPEC)
    assert np.count_nonzero(vec) == 1
    assert abs(float(np.abs(vec).max()) - 1.0) < 1e-12


def test_empty_text_raises():
    with pytest.raises(ValueError, match="empty"):
        embed_text("   ", SPEC)
    with pytest.raises(ValueError, match="index 1"):
        embed_batch(["fine", "  "], SPEC)


def test_batch_equals_per_item():
    texts = ["one", "two words", "three word text"]
    batch = embed_batch(texts, SPEC)
    for text, vec in zip(texts, batch):
        np.testing.assert_array_equal(vec, embed_text(text, SPEC))


def test_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        EmbedderSpec(kind="word2vec")
    with pytest.raises(ValueError, match="dimension"):
        EmbedderSpec(d=0)
    with pytest.raises(ValueError, match="ngram_min"):
        EmbedderSpec(ngram_min=5, ngram_max=3)


# -- external service client ----------------------------------------------------

class FakeResponse:
    def __init__(self, payload: dict):
        self._body = json.dumps(payload).encode("utf-8")

    def read(self):
        return self._body

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


EXT_SPEC = EmbedderSpec(kind=EXTERNAL_SERVICE, d=4, service_url="http://svc",
                        timeout_ms=100, retries=1)


def test_external_service_renormalizes(monkeypatch):
    payload = {"vectors": [[2.0, 0.0, 0.0, 0.0], [0.0, 3.0, 4.0, 0.0]]}
    monkeypatch.setattr("urllib.request.urlopen",
                        lambda req, timeout: FakeResponse(payload))
    out = external_embed(["a", "b"], EXT_SPEC)
    np.testing.assert_allclose(out[0], [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(out[1], [0.0, 0.6, 0.8, 0.0])


def test_external_service_missized_response(monkeypatch):
    monkeypatch.setattr("urllib.request.urlopen",
                        lambda req, timeout: FakeResponse({"vectors": [[1, 0, 0, 0]]}))
    with pytest.raises(RuntimeError, match="mis-sized"):
        external_embed(["a", "b"], EXT_SPEC)


def test_external_service_wrong_dimension(monkeypatch):
    monkeypatch.setattr("urllib.request.urlopen",
                        lambda req, timeout: FakeResponse({"vectors": [[1.0, 0.0]]}))
    with pytest.raises(ValueError, match="dimension"):
        external_embed(["a"], EXT_SPEC)


def test_external_service_retries_then_fails(monkeypatch):
    calls = []

    def failing(req, timeout):
        calls.append(1)
        raise OSError("connection refused")

    monkeypatch.setattr("urllib.request.urlopen", failing)
    monkeypatch.setattr("time.sleep", lambda s: None)
    with pytest.raises(RuntimeError, match="after 2 attempts"):
        external_embed(["a"], EXT_SPEC)
    assert len(calls) == 2


def test_external_service_requires_url():
    spec = EmbedderSpec(kind=EXTERNAL_SERVICE, d=4)
    with pytest.raises(ValueError, match="service_url"):
        external_embed(["a"], spec)
