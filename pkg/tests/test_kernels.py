"""The two kernel backends must be interchangeable: bit-identical hashing,
float64-level agreement on the dot products."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kic import kernels

pytestmark = pytest.mark.skipif(not kernels._HAVE_NUMBA,
                                reason="numba not importable")


@pytest.fixture
def restore_backend():
    before = kernels.backend()
    yield
    kernels.set_backend(before)


def test_set_backend_round_trip(restore_backend):
    kernels.set_backend("numpy")
    assert kernels.backend() == "numpy"
    kernels.set_backend("numba")
    assert kernels.backend() == "numba"


def test_unknown_backend_rejected():
    with pytest.raises(ValueError, match="unknown kernel backend"):
        kernels.set_backend("gpu")


def _accumulate_on(backend, data, nmin=3, nmax=5, seed=9, d=64):
    kernels.set_backend(backend)
    return kernels.hash_accumulate(data, nmin, nmax, seed, d)


@given(st.binary(max_size=60))
@settings(max_examples=60, deadline=None)
def test_hash_bit_identical_across_backends(payload):
    before = kernels.backend()
    try:
        a = _accumulate_on("numpy", payload)
        b = _accumulate_on("numba", payload)
    finally:
        kernels.set_backend(before)
    assert np.array_equal(a, b)


def test_hash_bit_identical_on_multibyte_text(restore_backend):
    for text in ("héllo wörld", "\U00010000\U00010000x", "ñ", "plain ascii"):
        a = _accumulate_on("numpy", text.encode("utf-8"))
        b = _accumulate_on("numba", text.encode("utf-8"))
        assert np.array_equal(a, b), text


def test_multibyte_char_counts_as_one_unit(restore_backend):
    # one astral character is four UTF-8 bytes but still below ngram_min,
    # so the whole text hashes as a single feature
    for backend in ("numpy", "numba"):
        acc = _accumulate_on(backend, "\U00010000".encode("utf-8"))
        assert np.abs(acc).sum() == 1.0


def test_accumulation_is_sum_over_ngrams(restore_backend):
    kernels.set_backend("numpy")
    text = "abcdef"
    total = kernels.hash_accumulate(text.encode(), 3, 5, 9, 64)
    parts = np.zeros(64)
    for n in range(3, 6):
        for start in range(len(text) - n + 1):
            gram = text[start:start + n].encode()
            parts += kernels.hash_accumulate(gram, n, n, 9, 64)
    assert np.array_equal(total, parts)


def test_matvec_agrees_with_numpy(restore_backend, rng):
    mat = rng.standard_normal((40, 16)).astype(np.float32)
    q = rng.standard_normal(16)
    expected = mat.astype(np.float64) @ q
    kernels.set_backend("numba")
    got = kernels.matvec_f64(mat, q)
    assert got.dtype == np.float64
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_order_hits_breaks_ties_by_ascending_id():
    scores = np.array([1.0, 2.0, 2.0, 0.5])
    ids = np.array([7, 9, 3, 1], dtype=np.uint64)
    order = kernels.order_hits(scores, ids, 4)
    assert list(ids[order]) == [3, 9, 7, 1]
    assert list(kernels.order_hits(scores, ids, 2)) == list(order[:2])
