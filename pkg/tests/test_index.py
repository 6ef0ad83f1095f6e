"""Exact search against a brute-force scan, IVF recall behavior, and the
binary persistence format."""

from __future__ import annotations

import numpy as np
import pytest

from kic.embedding import HASHED_NGRAM, EmbedderSpec
from kic.index import (ExactIndex, IvfIndex, benchmark_vectors, build_exact,
                       build_ivf, load_index, recall_at, save_index, search)
from kic.store import KeyValuePair

from reference_oracles import brute_force_mips

SPEC = EmbedderSpec(kind=HASHED_NGRAM, d=32, seed=11)


def _kvs(texts, start_id=1):
    return [KeyValuePair(start_id + i, 0, "dictionary", text, f"value {i}")
            for i, text in enumerate(texts)]


@pytest.fixture(scope="module")
def vec_index():
    keys = benchmark_vectors(200, 16, seed=3)
    ids = np.arange(1, 201, dtype=np.uint64)
    return ExactIndex(16, 200, keys, ids)


def test_exact_matches_brute_force_including_tie_order():
    # duplicated key texts embed to identical rows, forcing score ties
    texts = ["red apple", "green pear", "red apple", "ripe plum",
             "green pear", "sour grape"]
    index = build_exact(_kvs(texts), SPEC)
    for row in index.keys:
        hits = search(index, row.astype(np.float64), top_m=6)
        expected = brute_force_mips(index.keys, index.ids, row, 6)
        assert [h.kv_id for h in hits] == [kv_id for kv_id, _ in expected]
        for hit, (_, score) in zip(hits, expected):
            assert hit.score == pytest.approx(score, abs=1e-12)


def test_top_m_edges(vec_index):
    q = vec_index.keys[0].astype(np.float64)
    assert search(vec_index, q, top_m=0) == []
    assert len(search(vec_index, q, top_m=10_000)) == vec_index.n


def test_query_dimension_checked(vec_index):
    with pytest.raises(ValueError, match="dimension"):
        search(vec_index, np.zeros(17), top_m=5)


def test_row_subset_restricts_hits(vec_index):
    q = vec_index.keys[5].astype(np.float64)
    rows = np.array([0, 5, 9])
    hits = search(vec_index, q, top_m=3, row_subset=rows)
    assert {h.kv_id for h in hits} <= {1, 6, 10}
    assert hits[0].kv_id == 6  # its own row wins
    assert search(vec_index, q, top_m=3, row_subset=np.array([], dtype=np.int64)) == []


def test_build_exact_rejects_empty():
    with pytest.raises(ValueError, match="empty partition"):
        build_exact([], SPEC)
    with pytest.raises(ValueError, match="un-embeddable"):
        build_exact(_kvs(["   ", "\t"]), SPEC)


def test_build_exact_skips_blank_keys():
    index = build_exact(_kvs(["good key", "   ", "another key"]), SPEC)
    assert index.n == 2
    assert index.skipped == 1
    assert list(index.ids) == [1, 3]


def test_ivf_build_is_deterministic(vec_index):
    a = build_ivf(vec_index, n_clusters=10, seed=5)
    b = build_ivf(vec_index, n_clusters=10, seed=5)
    assert np.array_equal(a.centroids, b.centroids)
    assert all(np.array_equal(x, y) for x, y in zip(a.postings, b.postings))


def test_ivf_cluster_count_validated(vec_index):
    with pytest.raises(ValueError, match="exceeds"):
        build_ivf(vec_index, n_clusters=vec_index.n + 1)
    with pytest.raises(ValueError, match=">= 1"):
        build_ivf(vec_index, n_clusters=0)


def test_ivf_nprobe_validated(vec_index):
    ivf = build_ivf(vec_index, n_clusters=10)
    q = vec_index.keys[0].astype(np.float64)
    for bad in (0, 11):
        with pytest.raises(ValueError, match="nprobe"):
            search(ivf, q, top_m=5, nprobe=bad)


def test_ivf_recall_non_decreasing_in_nprobe(vec_index):
    ivf = build_ivf(vec_index, n_clusters=20, seed=0)
    rng = np.random.default_rng(7)
    queries = vec_index.keys[:40].astype(np.float64)
    queries += 0.02 * rng.standard_normal(queries.shape)
    recalls = []
    for nprobe in (1, 2, 5, 10, 20):
        total = 0.0
        for q in queries:
            truth = search(vec_index, q, top_m=10)
            total += recall_at(search(ivf, q, top_m=10, nprobe=nprobe), truth)
        recalls.append(total / len(queries))
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    # probing every cluster is a full scan
    assert recalls[-1] == 1.0


def test_save_load_round_trip_exact(tmp_path):
    index = build_exact(_kvs(["alpha beta", "gamma delta", "epsilon"]), SPEC)
    path = tmp_path / "exact.kicx"
    save_index(index, path)
    loaded = load_index(path, expect_d=SPEC.d)
    assert isinstance(loaded, ExactIndex)
    assert np.array_equal(loaded.keys, index.keys)
    assert np.array_equal(loaded.ids, index.ids)
    q = index.keys[1].astype(np.float64)
    assert search(loaded, q, 3) == search(index, q, 3)


def test_save_load_round_trip_ivf(tmp_path, vec_index):
    ivf = build_ivf(vec_index, n_clusters=8, seed=2, nprobe=3)
    path = tmp_path / "ivf.kicx"
    save_index(ivf, path)
    loaded = load_index(path)
    assert isinstance(loaded, IvfIndex)
    assert loaded.n_clusters == 8
    assert np.array_equal(loaded.centroids, ivf.centroids)
    assert all(np.array_equal(x, y) for x, y in zip(loaded.postings, ivf.postings))
    q = vec_index.keys[3].astype(np.float64)
    assert search(loaded, q, 10) == search(ivf, q, 10)


def _saved(tmp_path):
    index = build_exact(_kvs(["alpha beta", "gamma delta"]), SPEC)
    path = tmp_path / "idx.kicx"
    save_index(index, path)
    return path


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.kicx"
    path.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(ValueError, match="bad magic"):
        load_index(path)


def test_load_rejects_wrong_version(tmp_path):
    path = _saved(tmp_path)
    data = bytearray(path.read_bytes())
    data[4] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="version"):
        load_index(path)


def test_load_rejects_truncation(tmp_path):
    path = _saved(tmp_path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 5])
    with pytest.raises(ValueError, match="truncated"):
        load_index(path)


def test_load_rejects_dimension_mismatch(tmp_path):
    path = _saved(tmp_path)
    with pytest.raises(ValueError, match="dimension"):
        load_index(path, expect_d=SPEC.d + 1)


def test_benchmark_vectors_are_unit_float32():
    vecs = benchmark_vectors(100, 24, seed=1)
    assert vecs.shape == (100, 24)
    assert vecs.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(vecs, benchmark_vectors(100, 24, seed=1))


def test_recall_at_counts_overlap(vec_index):
    q = vec_index.keys[0].astype(np.float64)
    truth = search(vec_index, q, 10)
    assert recall_at(truth, truth) == 1.0
    assert recall_at(truth[:5], truth) == 0.5
    assert recall_at([], truth) == 0.0
    assert recall_at([], []) == 1.0
