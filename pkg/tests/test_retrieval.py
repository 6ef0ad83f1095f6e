"""Keyword extraction, the two pre-filters, and the retrieval paths that feed
pieces into the model input."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kic import tokenizer
from kic.embedding import HASHED_NGRAM, EmbedderSpec
from kic.index import build_exact
from kic.retrieval import (KnowledgeContext, RetrievalRequest, augment_input,
                           build_alias_table, extract_keywords,
                           load_stopwords, prefilter_dictionary,
                           prefilter_entity, retrieve, retrieve_plaintext,
                           retrieve_union)
from kic.store import KnowledgeStore, build_plaintext_partition

from reference_oracles import RAKE_HAND_TRACE

SPEC = EmbedderSpec(kind=HASHED_NGRAM, d=64, seed=5)


# -- keyword extraction -------------------------------------------------------

def test_keywords_match_hand_trace():
    got = extract_keywords("the cat sat on the mat", frozenset({"the", "on"}))
    assert got == RAKE_HAND_TRACE


def test_keywords_empty_text_rejected():
    with pytest.raises(ValueError, match="empty"):
        extract_keywords("   ", frozenset())


def test_keywords_all_stopwords_gives_nothing():
    assert extract_keywords("the of and", frozenset({"the", "of", "and"})) == []


def test_punctuation_breaks_phrases():
    got = extract_keywords("red apple, green!", frozenset())
    assert [phrase for phrase, _ in got] == ["red apple", "green"]


def test_equal_scores_keep_first_occurrence_order():
    got = extract_keywords("zebra. yak. xerus.", frozenset())
    assert [phrase for phrase, _ in got] == ["zebra", "yak", "xerus"]
    assert len({score for _, score in got}) == 1


def test_packaged_stopwords_load():
    words = load_stopwords()
    assert "the" in words
    assert len(words) > 50


def test_stopwords_from_file(tmp_path):
    path = tmp_path / "stop.txt"
    path.write_text("foo\nbar\n\n")
    assert load_stopwords(path) == frozenset({"foo", "bar"})


# -- pre-filters ----------------------------------------------------------------

def _store_with(category, triples):
    store = KnowledgeStore()
    lines = [json.dumps({"subject": s, "relation": r, "object": o})
             for s, r, o in triples]
    summary = store.ingest_triples(lines, category)
    assert not summary.errors
    return store


def test_dictionary_prefilter_matches_whole_tokens_only():
    store = _store_with("dictionary", [
        ("cat", "IsDefinedAs", "a small animal"),
        ("catalog", "IsDefinedAs", "a list of items"),
    ])
    partition = store.get_partition("dictionary")
    matched = prefilter_dictionary(partition, [("cat", 1.0)])
    keys = {store.kv(kv_id).key_text for kv_id in matched}
    assert keys == {"cat"}
    assert prefilter_dictionary(partition, []) == set()


def test_entity_prefilter_prefers_longest_alias():
    store = _store_with("entity", [
        ("united states", "capital", "washington"),
        ("states", "rhymeswith", "gates"),
    ])
    partition = store.get_partition("entity")
    table = build_alias_table(partition, store)
    assert set(table) == {"united states", "states"}

    hit = prefilter_entity("the united states border", table, partition)
    subjects = {store.triple(store.kv(kv_id).triple_id).subject for kv_id in hit}
    assert subjects == {"united states"}

    hit = prefilter_entity("heavy states of matter", table, partition)
    subjects = {store.triple(store.kv(kv_id).triple_id).subject for kv_id in hit}
    assert subjects == {"states"}

    assert prefilter_entity("nothing relevant", table, partition) == set()


# -- category retrieval ----------------------------------------------------------

def test_request_validation():
    with pytest.raises(ValueError, match="max_pieces"):
        RetrievalRequest("q", "dictionary", top_m=5, max_pieces=-1)
    with pytest.raises(ValueError, match="top_m"):
        RetrievalRequest("q", "dictionary", top_m=2, max_pieces=5)


def test_retrieve_finds_planted_fact(small_suite):
    task = small_suite.train_tasks[0]
    example = task.examples[0]
    subject = example.fields["word"]
    answer = example.target
    out = retrieve(RetrievalRequest(f"define {subject}", "dictionary",
                                    top_m=10, max_pieces=3), small_suite.ctx)
    assert out.category == "dictionary"
    assert answer in out.pieces[0][0]
    # scores come back best first
    scores = [score for _, score in out.pieces]
    assert scores == sorted(scores, reverse=True)


def test_retrieve_unknown_category_raises(small_suite):
    with pytest.raises(KeyError, match="no index"):
        retrieve(RetrievalRequest("q", "nonsense"), small_suite.ctx)


def test_retrieve_zero_pieces(small_suite):
    out = retrieve(RetrievalRequest("define thing", "dictionary",
                                    top_m=10, max_pieces=0), small_suite.ctx)
    assert out.pieces == []


def test_empty_prefilter_falls_back_to_whole_partition(small_suite):
    # no word here overlaps any stored key, so the pre-filter matches nothing
    out = retrieve(RetrievalRequest("xyzzy quux", "dictionary",
                                    top_m=10, max_pieces=3), small_suite.ctx)
    assert len(out.pieces) == 3


def test_duplicate_values_collapse(small_suite):
    # commonsense stores three key variants per fact with one shared value
    task = small_suite.train_tasks[1]
    subject = task.examples[0].fields["word"]
    out = retrieve(RetrievalRequest(f"what can a {subject} do", "commonsense",
                                    top_m=20, max_pieces=10), small_suite.ctx)
    values = [value for value, _ in out.pieces]
    assert len(values) == len(set(values))


def test_union_retrieval(small_suite):
    out = retrieve_union("define anything", small_suite.ctx, top_m=10,
                         max_pieces=4)
    assert out.category == "union"
    assert len(out.pieces) == 4


def test_union_requires_union_index(small_suite):
    ctx = KnowledgeContext.build(small_suite.store, small_suite.ctx.embedder,
                                 small_suite.ctx.indexes, union_index=None)
    with pytest.raises(KeyError, match="union"):
        retrieve_union("q", ctx, top_m=5, max_pieces=2)


def test_plaintext_retrieval(tmp_path, small_suite):
    text = tmp_path / "corpus.txt"
    text.write_text("the quick brown fox jumps over the lazy dog. "
                    "a stitch in time saves nine. " * 20)
    partition = build_plaintext_partition(text, words_per_passage=16)
    ctx = KnowledgeContext.build(small_suite.store, SPEC,
                                 small_suite.ctx.indexes)
    ctx.plaintext_index = build_exact(partition.kvs, SPEC)
    ctx.plaintext_values = {kv.kv_id: kv.value_text for kv in partition.kvs}
    out = retrieve_plaintext("quick brown fox", ctx, top_m=5, max_pieces=2)
    assert out.category == "plaintext"
    assert "fox" in out.pieces[0][0]

    bare = KnowledgeContext.build(small_suite.store, SPEC,
                                  small_suite.ctx.indexes)
    with pytest.raises(KeyError, match="plain-text"):
        retrieve_plaintext("q", bare, top_m=5, max_pieces=2)


# -- input assembly ---------------------------------------------------------------

def test_augment_plain_input_passes_through():
    ids = tokenizer.encode("hello")
    out = augment_input(ids, [], max_input_len=32)
    assert out.ids == ids
    assert not out.input_truncated


def test_augment_marks_truncated_input():
    ids = tokenizer.encode("a long input that must be cut")
    out = augment_input(ids, [], max_input_len=4)
    assert out.ids == ids[:4]
    assert out.input_truncated


def test_augment_layout():
    ids = tokenizer.encode("q")
    out = augment_input(ids, [("ab", 2.0), ("cd", 1.0)], max_input_len=64)
    know = out.ids.index(tokenizer.KNOW_ID)
    assert out.ids[:know] == ids
    rest = out.ids[know + 1:]
    assert rest.count(tokenizer.PIECE_ID) == 1
    split = rest.index(tokenizer.PIECE_ID)
    assert tokenizer.decode(rest[:split]) == "ab"
    assert tokenizer.decode(rest[split + 1:]) == "cd"


def test_augment_rejects_bad_length():
    with pytest.raises(ValueError, match="max_input_len"):
        augment_input([5], [], max_input_len=0)


@given(st.lists(st.integers(5, 260), max_size=40),
       st.lists(st.tuples(st.text("ab", min_size=1, max_size=8),
                          st.floats(0, 1)), max_size=4),
       st.integers(1, 48))
@settings(max_examples=80, deadline=None)
def test_augment_never_exceeds_budget(ids, pieces, max_len):
    out = augment_input(ids, pieces, max_len)
    assert len(out.ids) <= max_len
    keep = min(len(ids), max_len)
    assert out.ids[:keep] == ids[:keep]
    assert out.input_truncated == (len(ids) > max_len)
