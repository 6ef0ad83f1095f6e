"""Deterministic dense embeddings for keys and queries.

Two embedder kinds share one spec: ``hashed-ngram`` (seeded FNV-1a over
character n-grams of the normalized text, signed buckets, L2-normalized) and
``external-service`` (a JSON-over-HTTP client for a sentence-encoder service;
vectors are re-normalized locally). Both normalize text the same way:
lowercase plus whitespace collapse.
"""

from __future__ import annotations

import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from . import kernels

HASHED_NGRAM = "hashed-ngram"
EXTERNAL_SERVICE = "external-service"


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = HASHED_NGRAM
    d: int = 256
    seed: int = 0
    ngram_min: int = 3
    ngram_max: int = 5
    service_url: str = ""
    timeout_ms: int = 5000
    retries: int = 2

    def __post_init__(self):
        if self.kind not in (HASHED_NGRAM, EXTERNAL_SERVICE):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.d <= 0:
            raise ValueError("embedding dimension must be positive")
        if self.ngram_min > self.ngram_max:
            raise ValueError("ngram_min must be <= ngram_max")


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def embed_text(text: str, spec: EmbedderSpec) -> np.ndarray:
    """Unit-norm float64 vector; deterministic for a fixed (text, spec)."""
    norm_text = normalize_text(text)
    if not norm_text:
        raise ValueError("cannot embed empty or whitespace-only text")
    if spec.kind == EXTERNAL_SERVICE:
        return external_embed([text], spec)[0]
    acc = kernels.hash_accumulate(
        norm_text.encode("utf-8"), spec.ngram_min, spec.ngram_max, spec.seed, spec.d
    )
    length = np.linalg.norm(acc)
    if length == 0.0:
        # signs cancelled exactly; keep the all-zero vector rather than divide
        return acc
    return acc / length


def embed_batch(texts, spec: EmbedderSpec) -> list[np.ndarray]:
    for i, text in enumerate(texts):
        if not normalize_text(text):
            raise ValueError(f"text at index {i} is empty after normalization")
    if spec.kind == EXTERNAL_SERVICE:
        return external_embed(list(texts), spec)
    return [embed_text(t, spec) for t in texts]


def external_embed(texts, spec: EmbedderSpec) -> list[np.ndarray]:
    """POST {"texts": [...]} to the service; re-normalize what comes back."""
    if not spec.service_url:
        raise ValueError("external-service embedder requires service_url")
    body = json.dumps({"texts": list(texts)}).encode("utf-8")
    request = urllib.request.Request(
        spec.service_url, data=body, headers={"Content-Type": "application/json"}
    )
    timeout = spec.timeout_ms / 1000.0
    last_error: Exception | None = None
    for attempt in range(spec.retries + 1):
        try:
            with urllib.request.urlopen(request, timeout=timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
            break
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            last_error = exc
            if attempt < spec.retries:
                time.sleep(0.05 * (attempt + 1))
    else:
        raise RuntimeError(
            f"embedding service failed after {spec.retries + 1} attempts: {last_error}"
        )
    vectors = payload.get("vectors")
    if vectors is None or len(vectors) != len(texts):
        raise RuntimeError("embedding service response missing or mis-sized 'vectors'")
    out = []
    for i, values in enumerate(vectors):
        vec = np.asarray(values, dtype=np.float64)
        if vec.shape != (spec.d,):
            raise ValueError(
                f"service returned dimension {vec.shape} for text {i}, expected ({spec.d},)"
            )
        length = np.linalg.norm(vec)
        if length == 0.0:
            raise ValueError(f"service returned a zero vector for text {i}")
        out.append(vec / length)
    return out
