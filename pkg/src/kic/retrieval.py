"""Instance-to-knowledge retrieval: keyword extraction, category pre-filters,
inner-product search, and knowledge-augmented input assembly.

Dictionary queries are pre-filtered by RAKE keywords (whole-token match on
keys), entity queries by greedy longest-match alias scanning over entity
subjects. An empty pre-filter result falls back to the whole partition, so
retrieval never comes back empty because a filter missed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import tokenizer
from .embedding import EmbedderSpec, embed_text, normalize_text
from .index import Index, SearchHit, search
from .store import KnowledgeStore, MemoryPartition

_WORD_RE = re.compile(r"[a-z0-9]+")
_PHRASE_BOUNDARY_RE = re.compile(r"[^a-z0-9\s]+")


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Stopword fixture: one word per line; packaged list by default."""
    if path is None:
        text = resources.files("kic.data").joinpath("stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def extract_keywords(text: str, stopwords: frozenset[str]) -> list[tuple[str, float]]:
    """RAKE: candidate phrases between stopwords/punctuation, scored by
    sum over member words of degree(w)/freq(w), ranked descending with ties
    by first occurrence.
    """
    norm = normalize_text(text)
    if not norm:
        raise ValueError("cannot extract keywords from empty text")
    phrases: list[list[str]] = []
    for chunk in _PHRASE_BOUNDARY_RE.split(norm):
        current: list[str] = []
        for word in _WORD_RE.findall(chunk):
            if word in stopwords:
                if current:
                    phrases.append(current)
                current = []
            else:
                current.append(word)
        if current:
            phrases.append(current)
    if not phrases:
        return []
    freq: dict[str, int] = {}
    degree: dict[str, int] = {}
    for words in phrases:
        for word in words:
            freq[word] = freq.get(word, 0) + 1
            degree[word] = degree.get(word, 0) + len(words)
    word_score = {w: degree[w] / freq[w] for w in freq}
    ranked: list[tuple[str, float]] = []
    seen: set[str] = set()
    for words in phrases:
        phrase = " ".join(words)
        if phrase in seen:
            continue
        seen.add(phrase)
        ranked.append((phrase, sum(word_score[w] for w in words)))
    ranked.sort(key=lambda pair: -pair[1])  # stable sort keeps first-occurrence ties
    return ranked


# -- pre-filters ---------------------------------------------------------------

def prefilter_dictionary(partition: MemoryPartition, keywords) -> set[int]:
    """kv_ids whose key contains any keyword word as a whole token."""
    words = set()
    for phrase, _score in keywords:
        words.update(_WORD_RE.findall(phrase))
    if not words:
        return set()
    matched = set()
    for kv in partition.kvs:
        key_tokens = set(_WORD_RE.findall(kv.key_text.lower()))
        if key_tokens & words:
            matched.add(kv.kv_id)
    return matched


def build_alias_table(entity_partition: MemoryPartition, store: KnowledgeStore) -> dict[str, set[int]]:
    """Normalized entity subject -> ids of triples carrying that subject."""
    table: dict[str, set[int]] = {}
    for kv in entity_partition.kvs:
        subject = store.triple(kv.triple_id).subject
        alias = normalize_text(subject)
        if alias:
            table.setdefault(alias, set()).add(kv.triple_id)
    return table


def _match_aliases(query_text: str, alias_table: dict[str, set[int]]) -> set[int]:
    """Greedy longest-match scan over query tokens; returns matched triple ids."""
    tokens = normalize_text(query_text).split()
    alias_tokens = {alias: alias.split() for alias in alias_table}
    max_len = max((len(t) for t in alias_tokens.values()), default=0)
    matched: set[int] = set()
    i = 0
    while i < len(tokens):
        hit_len = 0
        hit_alias = None
        for length in range(min(max_len, len(tokens) - i), 0, -1):
            candidate = " ".join(tokens[i : i + length])
            if candidate in alias_table:
                hit_len = length
                hit_alias = candidate
                break
        if hit_alias is not None:
            matched |= alias_table[hit_alias]
            i += hit_len
        else:
            i += 1
    return matched


def prefilter_entity(query_text: str, alias_table: dict[str, set[int]],
                     partition: MemoryPartition) -> set[int]:
    """kv_ids of KVs whose source triple subject was mentioned in the query."""
    triple_ids = _match_aliases(query_text, alias_table)
    if not triple_ids:
        return set()
    return {kv.kv_id for kv in partition.kvs if kv.triple_id in triple_ids}


# -- retrieval -----------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalRequest:
    query_text: str
    category: str
    top_m: int = 50
    max_pieces: int = 10

    def __post_init__(self):
        if self.max_pieces < 0:
            raise ValueError("max_pieces must be >= 0")
        if self.top_m < self.max_pieces:
            raise ValueError("top_m must be >= max_pieces")


@dataclass
class RetrievedKnowledge:
    category: str
    pieces: list[tuple[str, float]]  # (value_text, score), best first


@dataclass
class KnowledgeContext:
    """Immutable retrieval bundle shared by training and evaluation."""

    store: KnowledgeStore
    embedder: EmbedderSpec
    indexes: dict[str, Index]                      # per category name
    union_index: Index | None = None
    stopwords: frozenset[str] = field(default_factory=frozenset)
    alias_table: dict[str, set[int]] = field(default_factory=dict)
    plaintext_index: Index | None = None
    plaintext_values: dict[int, str] = field(default_factory=dict)

    @classmethod
    def build(cls, store: KnowledgeStore, embedder: EmbedderSpec,
              indexes: dict[str, Index], union_index: Index | None = None,
              stopwords: frozenset[str] | None = None) -> "KnowledgeContext":
        stop = load_stopwords() if stopwords is None else stopwords
        alias = {}
        if "entity" in indexes:
            alias = build_alias_table(store.get_partition("entity"), store)
        return cls(store, embedder, dict(indexes), union_index, stop, alias)


def _hit_rows(idx: Index, kv_ids: set[int]) -> np.ndarray:
    wanted = np.asarray(sorted(kv_ids), dtype=np.uint64)
    return np.nonzero(np.isin(idx.ids, wanted))[0]


def retrieve(request: RetrievalRequest, ctx: KnowledgeContext) -> RetrievedKnowledge:
    """Pre-filter (dictionary/entity), embed the query, search, dedupe values."""
    idx = ctx.indexes.get(request.category)
    if idx is None:
        raise KeyError(f"no index built for category {request.category!r}")
    partition = ctx.store.get_partition(request.category)

    row_subset = None
    if request.category == "dictionary":
        keywords = extract_keywords(request.query_text, ctx.stopwords)
        kv_ids = prefilter_dictionary(partition, keywords)
        if kv_ids:
            row_subset = _hit_rows(idx, kv_ids)
    elif request.category == "entity":
        kv_ids = prefilter_entity(request.query_text, ctx.alias_table, partition)
        if kv_ids:
            row_subset = _hit_rows(idx, kv_ids)

    if request.max_pieces == 0:
        return RetrievedKnowledge(request.category, [])
    query = embed_text(request.query_text, ctx.embedder)
    hits = search(idx, query, request.top_m, row_subset=row_subset)
    return RetrievedKnowledge(request.category, _collapse(hits, ctx.store.kv, request.max_pieces))


def retrieve_union(query_text: str, ctx: KnowledgeContext, top_m: int,
                   max_pieces: int) -> RetrievedKnowledge:
    """No-selector mode: search the union of all categories, no pre-filter."""
    if ctx.union_index is None:
        raise KeyError("no union index built")
    if max_pieces == 0:
        return RetrievedKnowledge("union", [])
    query = embed_text(query_text, ctx.embedder)
    hits = search(ctx.union_index, query, top_m)
    return RetrievedKnowledge("union", _collapse(hits, ctx.store.kv, max_pieces))


def retrieve_plaintext(query_text: str, ctx: KnowledgeContext, top_m: int,
                       max_pieces: int) -> RetrievedKnowledge:
    if ctx.plaintext_index is None:
        raise KeyError("no plain-text index built")
    if max_pieces == 0:
        return RetrievedKnowledge("plaintext", [])
    query = embed_text(query_text, ctx.embedder)
    hits = search(ctx.plaintext_index, query, top_m)
    lookup = ctx.plaintext_values.__getitem__
    pieces = []
    seen = set()
    for hit in hits:
        value = lookup(hit.kv_id)
        if value in seen:
            continue
        seen.add(value)
        pieces.append((value, hit.score))
        if len(pieces) == max_pieces:
            break
    return RetrievedKnowledge("plaintext", pieces)


def _collapse(hits: list[SearchHit], kv_lookup, max_pieces: int) -> list[tuple[str, float]]:
    """Duplicate value_texts collapse to their best-scoring hit."""
    pieces: list[tuple[str, float]] = []
    seen: set[str] = set()
    for hit in hits:
        value = kv_lookup(hit.kv_id).value_text
        if value in seen:
            continue
        seen.add(value)
        pieces.append((value, hit.score))
        if len(pieces) == max_pieces:
            break
    return pieces


# -- input assembly --------------------------------------------------------------

@dataclass
class AugmentedInput:
    ids: list[int]
    input_truncated: bool = False


def augment_input(input_tokens, pieces, max_input_len: int) -> AugmentedInput:
    """input, KNOW delimiter, then pieces best-first with PIECE delimiters
    between them; the whole sequence is tail-truncated to max_input_len.
    """
    if max_input_len < 1:
        raise ValueError("max_input_len must be >= 1")
    ids = [int(t) for t in input_tokens]
    truncated_input = False
    if len(ids) > max_input_len:
        ids = ids[:max_input_len]
        truncated_input = True
    if not pieces:
        return AugmentedInput(ids, truncated_input)
    out = list(ids)
    out.append(tokenizer.KNOW_ID)
    for i, (value_text, _score) in enumerate(pieces):
        if i > 0:
            out.append(tokenizer.PIECE_ID)
        out.extend(tokenizer.encode(value_text))
        if len(out) >= max_input_len:
            break
    return AugmentedInput(out[:max_input_len], truncated_input)
