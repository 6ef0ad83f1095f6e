"""Independent reference computations used to pin expected test values.

Everything in this module is written against the documented algorithms, not
against the package code, and deliberately shares no helpers with it. Tests
compare package output to these oracles (or to constants frozen from a single
oracle run, noted inline where that is the case).
"""

from __future__ import annotations

import math

import numpy as np

# ---------------------------------------------------------------------------
# Hashed n-gram embedding oracle

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes, seed: int) -> int:
    """64-bit FNV-1a over the 8 little-endian seed bytes, then the payload."""
    h = FNV64_OFFSET
    for b in seed.to_bytes(8, "little"):
        h ^= b
        h = (h * FNV64_PRIME) & _MASK64
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & _MASK64
    return h


def char_ngrams(text: str, nmin: int, nmax: int) -> list[str]:
    """N-grams over the normalized text; whole text if shorter than nmin."""
    norm = " ".join(text.lower().split())
    if len(norm) < nmin:
        return [norm]
    grams = []
    for n in range(nmin, min(nmax, len(norm)) + 1):
        for start in range(len(norm) - n + 1):
            grams.append(norm[start : start + n])
    return grams


def hashed_ngram_buckets(text: str, nmin: int, nmax: int, d: int, seed: int):
    """(bucket, sign) per n-gram, in extraction order."""
    out = []
    for gram in char_ngrams(text, nmin, nmax):
        h = fnv1a64(gram.encode("utf-8"), seed)
        sign = -1 if (h >> 63) & 1 else 1
        out.append((h % d, sign))
    return out


def hashed_ngram_vector(text: str, nmin: int, nmax: int, d: int, seed: int):
    vec = np.zeros(d, dtype=np.float64)
    for bucket, sign in hashed_ngram_buckets(text, nmin, nmax, d, seed):
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# ---------------------------------------------------------------------------
# Brute-force maximum inner product scan

def brute_force_mips(keys, ids, query, top_m):
    """Scores in float64, sorted by (-score, id). Returns [(id, score)]."""
    rows = [np.asarray(row, dtype=np.float64) for row in keys]
    q = np.asarray(query, dtype=np.float64)
    scored = []
    for row, kv_id in zip(rows, ids):
        score = float(sum(float(a) * float(b) for a, b in zip(row, q)))
        scored.append((int(kv_id), score))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:top_m]


# ---------------------------------------------------------------------------
# Softmax / balancing-loss hand evaluations

def softmax_reference(logits):
    exps = [math.exp(float(v)) for v in logits]
    total = sum(exps)
    return [e / total for e in exps]


def balancing_loss_reference(chosen_list, probs_list):
    """(K+1) * sum_i f_i * P_i with f from argmax counts, P from mean probs."""
    n_experts = len(probs_list[0])
    batch = len(chosen_list)
    f = [0.0] * n_experts
    for c in chosen_list:
        f[c] += 1.0 / batch
    p = [0.0] * n_experts
    for probs in probs_list:
        for i, v in enumerate(probs):
            p[i] += float(v) / batch
    return n_experts * sum(fi * pi for fi, pi in zip(f, p))


# Worked 3-sequence / 2-expert fixture, evaluated by hand:
#   chosen = [0, 0, 1], probs = (0.51, 0.49), (0.51, 0.49), (0.0, 1.0)
#   f = (2/3, 1/3); P = (0.34, 0.66)
#   loss = 2 * (2/3 * 0.34 + 1/3 * 0.66) = 2 * (0.22666... + 0.22) = 0.89333...
WORKED_BALANCE_FIXTURE = dict(
    chosen=[0, 0, 1],
    probs=[(0.51, 0.49), (0.51, 0.49), (0.0, 1.0)],
    loss=0.8933333333333333,
)


# ---------------------------------------------------------------------------
# Exhaustive sequence probability enumeration

def enumerate_length2_prob_sum(log_prob_fn, vocab_size):
    """Sum of exp(log p(candidate)) over all V^2 candidates of length 2."""
    total = 0.0
    for a in range(vocab_size):
        for b in range(vocab_size):
            total += math.exp(log_prob_fn([a, b]))
    return total


# ---------------------------------------------------------------------------
# Finite differences (central)

def finite_difference(f, arr, h=1e-5):
    """Central-difference gradient of scalar f wrt one ndarray (flattened)."""
    arr = np.asarray(arr)
    grad = np.zeros(arr.size, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(arr.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(arr.shape)


# ---------------------------------------------------------------------------
# RAKE hand trace for "the cat sat on the mat"
#
#   stopwords used: the, on
#   candidate phrases: "cat sat", "mat"
#   freq:   cat 1, sat 1, mat 1
#   degree: cat 2, sat 2, mat 1   (degree adds phrase length per occurrence)
#   word scores: cat 2.0, sat 2.0, mat 1.0
#   phrase scores: "cat sat" = 4.0, "mat" = 1.0
RAKE_HAND_TRACE = [("cat sat", 4.0), ("mat", 1.0)]
