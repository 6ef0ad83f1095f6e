"""Typed knowledge memory: triple ingestion, key-value materialization,
partition access, and directory persistence.

Six categories hold <subject, relation, object> triples; each category has a
fixed strategy turning a triple into searchable key/value pairs (the key is
what gets embedded, the value is the text injected into the model input).
Expert index 0 is the generalist and never owns triples; categories take
ordinals 1..6 in the order below.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

CATEGORY_NAMES = ("dictionary", "commonsense", "entity", "event", "script", "causality")
K_CATEGORIES = len(CATEGORY_NAMES)
N_EXPERTS = K_CATEGORIES + 1  # + generalist at index 0
GENERALIST = "generalist"

PLAINTEXT = "plaintext"  # seventh, non-routed partition used by one ablation

KVS_PER_TRIPLE = {
    "dictionary": 1,
    "commonsense": 3,
    "entity": 2,
    "event": 3,
    "script": 2,
    "causality": 2,
}


def category_ordinal(name: str) -> int:
    """1-based expert ordinal for a category name; 0 is the generalist."""
    try:
        return CATEGORY_NAMES.index(name) + 1
    except ValueError:
        raise ValueError(
            f"unknown category {name!r}; valid names: {', '.join(CATEGORY_NAMES)}"
        ) from None


def category_name(ordinal: int) -> str:
    if ordinal == 0:
        return GENERALIST
    if 1 <= ordinal <= K_CATEGORIES:
        return CATEGORY_NAMES[ordinal - 1]
    raise ValueError(f"expert ordinal {ordinal} outside 0..{K_CATEGORIES}")


@dataclass(frozen=True)
class KnowledgeTriple:
    id: int
    category: str
    subject: str
    relation: str
    object: str


@dataclass(frozen=True)
class KeyValuePair:
    kv_id: int
    triple_id: int
    category: str
    key_text: str
    value_text: str


@dataclass
class MemoryPartition:
    category: str
    kvs: tuple[KeyValuePair, ...]
    provenance: dict[str, str] = field(default_factory=dict)


@dataclass
class IngestSummary:
    new_triples: int = 0
    new_kvs: int = 0
    duplicates: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)


def build_key_values(triple: KnowledgeTriple, first_kv_id: int = 0) -> list[KeyValuePair]:
    """Materialize the category's key/value strategy for one triple.

    dictionary: key s -> value o. commonsense/event: keys {s, s o, s r o},
    all valued s r o. entity: keys {s, o} -> value o. script: keys {s, o} ->
    value r. causality: key and value are both "s o", and both "o s".
    Concatenation uses a single space throughout.
    """
    s, r, o = triple.subject, triple.relation, triple.object
    if triple.category == "dictionary":
        pairs = [(s, o)]
    elif triple.category in ("commonsense", "event"):
        full = f"{s} {r} {o}"
        pairs = [(s, full), (f"{s} {o}", full), (full, full)]
    elif triple.category == "entity":
        pairs = [(s, o), (o, o)]
    elif triple.category == "script":
        pairs = [(s, r), (o, r)]
    elif triple.category == "causality":
        pairs = [(f"{s} {o}", f"{s} {o}"), (f"{o} {s}", f"{o} {s}")]
    else:
        raise ValueError(f"unknown category {triple.category!r}")
    return [
        KeyValuePair(first_kv_id + i, triple.id, triple.category, key, value)
        for i, (key, value) in enumerate(pairs)
    ]


def _content_digest(category: str, subject: str, relation: str, obj: str) -> str:
    payload = "\x1f".join((category, subject, relation, obj)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


class KnowledgeStore:
    """In-memory store with directory persistence; single writer, many readers."""

    def __init__(self):
        self.triples: dict[int, KnowledgeTriple] = {}
        self._kvs: dict[str, list[KeyValuePair]] = {name: [] for name in CATEGORY_NAMES}
        self._kv_by_id: dict[int, KeyValuePair] = {}
        self._digest_to_id: dict[str, int] = {}
        self._provenance: dict[str, dict[str, str]] = {name: {} for name in CATEGORY_NAMES}
        self.next_triple_id = 1
        self.next_kv_id = 1

    # -- ingestion ----------------------------------------------------------

    def ingest_triples(self, lines, category: str, source_name: str = "<stream>") -> IngestSummary:
        """Ingest line-delimited JSON records {"subject","relation","object"}.

        Malformed or empty-field records are rejected with their line number;
        the rest of the stream is still processed. Re-ingesting identical
        content is a no-op (ids are stable).
        """
        if category not in CATEGORY_NAMES:
            raise ValueError(
                f"unknown category {category!r}; valid names: {', '.join(CATEGORY_NAMES)}"
            )
        summary = IngestSummary()
        for line_no, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                summary.errors.append((line_no, f"invalid JSON: {exc.msg}"))
                continue
            if not isinstance(record, dict):
                summary.errors.append((line_no, "record is not an object"))
                continue
            missing = [k for k in ("subject", "relation", "object") if k not in record]
            if missing:
                summary.errors.append((line_no, f"missing fields: {', '.join(missing)}"))
                continue
            subject = str(record["subject"])
            relation = str(record["relation"])
            obj = str(record["object"])
            if not subject.strip():
                summary.errors.append((line_no, "empty subject"))
                continue
            if not obj.strip():
                summary.errors.append((line_no, "empty object"))
                continue
            digest = _content_digest(category, subject, relation, obj)
            if digest in self._digest_to_id:
                summary.duplicates += 1
                continue
            triple = KnowledgeTriple(self.next_triple_id, category, subject, relation, obj)
            self.next_triple_id += 1
            kvs = build_key_values(triple, first_kv_id=self.next_kv_id)
            self.next_kv_id += len(kvs)
            self.triples[triple.id] = triple
            self._digest_to_id[digest] = triple.id
            self._kvs[category].extend(kvs)
            for kv in kvs:
                self._kv_by_id[kv.kv_id] = kv
            summary.new_triples += 1
            summary.new_kvs += len(kvs)
        if summary.errors:
            logger.warning(
                "%s: rejected %d record(s) during ingest into %s",
                source_name, len(summary.errors), category,
            )
        self._provenance.setdefault(category, {})[source_name] = _content_digest(
            category, source_name, "", str(summary.new_triples)
        )
        return summary

    def ingest_file(self, path: str | Path, category: str) -> IngestSummary:
        path = Path(path)
        with path.open("r", encoding="utf-8") as handle:
            return self.ingest_triples(handle, category, source_name=path.name)

    # -- access -------------------------------------------------------------

    def get_partition(self, category: str) -> MemoryPartition:
        if category not in CATEGORY_NAMES:
            raise ValueError(
                f"unknown category {category!r}; valid names: {', '.join(CATEGORY_NAMES)}"
            )
        kvs = tuple(sorted(self._kvs[category], key=lambda kv: kv.kv_id))
        return MemoryPartition(category, kvs, dict(self._provenance.get(category, {})))

    def all_kvs(self) -> tuple[KeyValuePair, ...]:
        """Every KV across the six categories, in kv_id order (union index)."""
        return tuple(self._kv_by_id[k] for k in sorted(self._kv_by_id))

    def kv(self, kv_id: int) -> KeyValuePair:
        return self._kv_by_id[kv_id]

    def triple(self, triple_id: int) -> KnowledgeTriple:
        return self.triples[triple_id]

    def counts(self) -> dict[str, tuple[int, int]]:
        by_cat = {name: [0, 0] for name in CATEGORY_NAMES}
        for triple in self.triples.values():
            by_cat[triple.category][0] += 1
        for name in CATEGORY_NAMES:
            by_cat[name][1] = len(self._kvs[name])
        return {name: tuple(pair) for name, pair in by_cat.items()}

    # -- persistence ---------------------------------------------------------

    def save(self, store_dir: str | Path) -> None:
        store_dir = Path(store_dir)
        store_dir.mkdir(parents=True, exist_ok=True)
        manifest: dict = {
            "version": 1,
            "next_triple_id": self.next_triple_id,
            "next_kv_id": self.next_kv_id,
            "categories": {},
        }
        for name in CATEGORY_NAMES:
            triples = [t for t in self.triples.values() if t.category == name]
            triples.sort(key=lambda t: t.id)
            triples_path = store_dir / f"{name}.triples.jsonl"
            with triples_path.open("w", encoding="utf-8") as handle:
                for t in triples:
                    handle.write(json.dumps({
                        "id": t.id, "subject": t.subject,
                        "relation": t.relation, "object": t.object,
                    }, ensure_ascii=False) + "\n")
            kvs_path = store_dir / f"{name}.kvs.jsonl"
            with kvs_path.open("w", encoding="utf-8") as handle:
                for kv in sorted(self._kvs[name], key=lambda kv: kv.kv_id):
                    handle.write(json.dumps({
                        "kv_id": kv.kv_id, "triple_id": kv.triple_id,
                        "key": kv.key_text, "value": kv.value_text,
                    }, ensure_ascii=False) + "\n")
            manifest["categories"][name] = {
                "triples": len(triples),
                "kvs": len(self._kvs[name]),
                "triples_sha256": _file_digest(triples_path),
                "kvs_sha256": _file_digest(kvs_path),
            }
        with (store_dir / "manifest.json").open("w", encoding="utf-8") as handle:
            json.dump(manifest, handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def load(cls, store_dir: str | Path) -> "KnowledgeStore":
        store_dir = Path(store_dir)
        manifest_path = store_dir / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no store manifest at {manifest_path}")
        with manifest_path.open("r", encoding="utf-8") as handle:
            manifest = json.load(handle)
        store = cls()
        store.next_triple_id = manifest["next_triple_id"]
        store.next_kv_id = manifest["next_kv_id"]
        for name in CATEGORY_NAMES:
            triples_path = store_dir / f"{name}.triples.jsonl"
            if triples_path.exists():
                with triples_path.open("r", encoding="utf-8") as handle:
                    for line in handle:
                        rec = json.loads(line)
                        triple = KnowledgeTriple(
                            rec["id"], name, rec["subject"], rec["relation"], rec["object"]
                        )
                        store.triples[triple.id] = triple
                        digest = _content_digest(name, triple.subject, triple.relation, triple.object)
                        store._digest_to_id[digest] = triple.id
            kvs_path = store_dir / f"{name}.kvs.jsonl"
            if kvs_path.exists():
                with kvs_path.open("r", encoding="utf-8") as handle:
                    for line in handle:
                        rec = json.loads(line)
                        kv = KeyValuePair(
                            rec["kv_id"], rec["triple_id"], name, rec["key"], rec["value"]
                        )
                        store._kvs[name].append(kv)
                        store._kv_by_id[kv.kv_id] = kv
        return store


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_plaintext_partition(sentence_file: str | Path, words_per_passage: int = 64) -> MemoryPartition:
    """Chunk a plain-text file into fixed-size passages; key = value = passage.

    This is the seventh, selector-free memory used by the plain-text ablation.
    KV ids are local to the partition (it is never persisted into a store).
    """
    text = Path(sentence_file).read_text(encoding="utf-8")
    words = text.split()
    if not words:
        raise ValueError(f"no text in {sentence_file}")
    kvs = []
    for start in range(0, len(words), words_per_passage):
        passage = " ".join(words[start : start + words_per_passage])
        kv_id = len(kvs) + 1
        kvs.append(KeyValuePair(kv_id, 0, PLAINTEXT, passage, passage))
    return MemoryPartition(PLAINTEXT, tuple(kvs))
