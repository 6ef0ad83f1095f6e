"""Knowledge store: key-value strategies, ingestion behavior, persistence."""

from __future__ import annotations

import json

import pytest

from kic.store import (
    CATEGORY_NAMES,
    KVS_PER_TRIPLE,
    K_CATEGORIES,
    N_EXPERTS,
    KnowledgeStore,
    KnowledgeTriple,
    build_key_values,
    build_plaintext_partition,
    category_name,
    category_ordinal,
)


def lines_of(*records):
    return [json.dumps(r) for r in records]


def test_category_ordinals_are_one_based_and_stable():
    assert K_CATEGORIES == 6
    assert N_EXPERTS == 7
    assert [category_ordinal(n) for n in CATEGORY_NAMES] == [1, 2, 3, 4, 5, 6]
    assert category_name(0) == "generalist"
    for name in CATEGORY_NAMES:
        assert category_name(category_ordinal(name)) == name


def test_category_ordinal_rejects_unknown_name():
    with pytest.raises(ValueError, match="unknown category"):
        category_ordinal("geography")
    with pytest.raises(ValueError):
        category_name(7)
    with pytest.raises(ValueError):
        category_name(-1)


# one triple per category; the first two rows use the documented example
# facts, so the expected texts below are exactly the strategy table
STRATEGY_CASES = [
    ("commonsense", ("bird", "CapableOf", "fly"),
     [("bird", "bird CapableOf fly"),
      ("bird fly", "bird CapableOf fly"),
      ("bird CapableOf fly", "bird CapableOf fly")]),
    ("entity", ("United States", "capital", "Washington D.C."),
     [("United States", "Washington D.C."),
      ("Washington D.C.", "Washington D.C.")]),
    ("dictionary", ("ephemeral", "is defined as", "lasting a very short time"),
     [("ephemeral", "lasting a very short time")]),
    ("event", ("breakfast", "precedes", "lunch"),
     [("breakfast", "breakfast precedes lunch"),
      ("breakfast lunch", "breakfast precedes lunch"),
      ("breakfast precedes lunch", "breakfast precedes lunch")]),
    ("script", ("bake bread", "preheat the oven", "mix the dough"),
     [("bake bread", "preheat the oven"),
      ("mix the dough", "preheat the oven")]),
    ("causality", ("rain", "causes", "wet streets"),
     [("rain wet streets", "rain wet streets"),
      ("wet streets rain", "wet streets rain")]),
]


@pytest.mark.parametrize("category,sro,expected", STRATEGY_CASES,
                         ids=[c[0] for c in STRATEGY_CASES])
def test_key_value_strategy_counts_and_texts(category, sro, expected):
    s, r, o = sro
    triple = KnowledgeTriple(1, category, s, r, o)
    kvs = build_key_values(triple, first_kv_id=10)
    assert len(kvs) == KVS_PER_TRIPLE[category]
    assert [(kv.key_text, kv.value_text) for kv in kvs] == expected
    assert [kv.kv_id for kv in kvs] == list(range(10, 10 + len(kvs)))
    assert all(kv.triple_id == 1 and kv.category == category for kv in kvs)


def test_build_key_values_rejects_unknown_category():
    with pytest.raises(ValueError, match="unknown category"):
        build_key_values(KnowledgeTriple(1, "geography", "a", "b", "c"))


def test_ingest_assigns_sequential_ids_and_counts():
    store = KnowledgeStore()
    summary = store.ingest_triples(
        lines_of({"subject": "bird", "relation": "CapableOf", "object": "fly"},
                 {"subject": "fish", "relation": "CapableOf", "object": "swim"}),
        "commonsense")
    assert (summary.new_triples, summary.new_kvs) == (2, 6)
    assert summary.duplicates == 0 and summary.errors == []
    assert store.counts()["commonsense"] == (2, 6)
    ids = [kv.kv_id for kv in store.get_partition("commonsense").kvs]
    assert ids == sorted(ids)
    assert store.kv(ids[0]).triple_id == 1
    assert store.triple(1).subject == "bird"


def test_reingest_is_idempotent():
    store = KnowledgeStore()
    payload = lines_of({"subject": "rain", "relation": "causes", "object": "mud"})
    first = store.ingest_triples(payload, "causality")
    second = store.ingest_triples(payload, "causality")
    assert first.new_triples == 1
    assert second.new_triples == 0
    assert second.duplicates == 1
    assert store.counts()["causality"] == (1, 2)
    # same content in a different category is a different fact
    other = store.ingest_triples(payload, "commonsense")
    assert other.new_triples == 1


def test_ingest_reports_bad_lines_and_keeps_going():
    store = KnowledgeStore()
    lines = [
        json.dumps({"subject": "a", "relation": "r", "object": "b"}),
        "not json",
        json.dumps(["not", "an", "object"]),
        json.dumps({"subject": "a", "object": "b"}),
        json.dumps({"subject": "  ", "relation": "r", "object": "b"}),
        json.dumps({"subject": "a", "relation": "r", "object": ""}),
        "",
        json.dumps({"subject": "c", "relation": "r", "object": "d"}),
    ]
    summary = store.ingest_triples(lines, "dictionary")
    assert summary.new_triples == 2
    assert [line_no for line_no, _ in summary.errors] == [2, 3, 4, 5, 6]
    messages = [msg for _, msg in summary.errors]
    assert "invalid JSON" in messages[0]
    assert "not an object" in messages[1]
    assert "missing fields: relation" in messages[2]
    assert "empty subject" in messages[3]
    assert "empty object" in messages[4]


def test_ingest_rejects_unknown_category():
    with pytest.raises(ValueError, match="dictionary, commonsense"):
        KnowledgeStore().ingest_triples([], "geography")


def test_non_string_fields_are_stringified():
    store = KnowledgeStore()
    summary = store.ingest_triples(
        lines_of({"subject": 7, "relation": 1.5, "object": True}), "dictionary")
    assert summary.new_triples == 1
    assert store.triple(1).subject == "7"
    assert store.triple(1).object == "True"


def test_save_load_round_trip(tmp_path):
    store = KnowledgeStore()
    store.ingest_triples(
        lines_of({"subject": "bird", "relation": "CapableOf", "object": "fly"}),
        "commonsense")
    store.ingest_triples(
        lines_of({"subject": "rain", "relation": "causes", "object": "mud"},
                 {"subject": "heat", "relation": "causes", "object": "sweat"}),
        "causality")
    store.save(tmp_path / "store")
    loaded = KnowledgeStore.load(tmp_path / "store")
    assert loaded.counts() == store.counts()
    assert loaded.next_triple_id == store.next_triple_id
    assert loaded.next_kv_id == store.next_kv_id
    for kv, orig in zip(loaded.all_kvs(), store.all_kvs()):
        assert (kv.kv_id, kv.triple_id, kv.category, kv.key_text, kv.value_text) \
            == (orig.kv_id, orig.triple_id, orig.category, orig.key_text, orig.value_text)
    # duplicate detection survives the round trip
    again = loaded.ingest_triples(
        lines_of({"subject": "bird", "relation": "CapableOf", "object": "fly"}),
        "commonsense")
    assert again.duplicates == 1 and again.new_triples == 0


def test_load_missing_manifest_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        KnowledgeStore.load(tmp_path / "nowhere")


def test_all_kvs_is_globally_ordered():
    store = KnowledgeStore()
    store.ingest_triples(lines_of({"subject": "a", "relation": "r", "object": "b"}),
                         "causality")
    store.ingest_triples(lines_of({"subject": "c", "relation": "r", "object": "d"}),
                         "dictionary")
    ids = [kv.kv_id for kv in store.all_kvs()]
    assert ids == sorted(ids)
    assert len(ids) == 3


def test_plaintext_partition_chunks_by_word_count(tmp_path):
    text_file = tmp_path / "corpus.txt"
    words = [f"w{i}" for i in range(150)]
    text_file.write_text(" ".join(words), encoding="utf-8")
    partition = build_plaintext_partition(text_file, words_per_passage=64)
    assert len(partition.kvs) == 3
    assert partition.kvs[0].key_text == " ".join(words[:64])
    assert partition.kvs[0].key_text == partition.kvs[0].value_text
    assert len(partition.kvs[2].key_text.split()) == 150 - 128
    assert [kv.kv_id for kv in partition.kvs] == [1, 2, 3]


def test_plaintext_partition_rejects_empty_file(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("   \n", encoding="utf-8")
    with pytest.raises(ValueError, match="no text"):
        build_plaintext_partition(empty)
