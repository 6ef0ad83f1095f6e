"""Hot numeric loops: numba-jitted kernels with a pure-numpy fallback.

The backend is selected once at import from the ``KIC_NUMBA`` env var
("0"/"false"/"off"/"no" forces numpy; anything else, or unset, uses numba when
importable). Both paths accumulate in the same order, so the hashing kernel is
bit-identical across backends; the dot-product kernels agree to float64
rounding. ``kic bench-index --kernels`` times the two side by side.
"""

from __future__ import annotations

import os

import numpy as np

FNV64_OFFSET = np.uint64(0xCBF29CE484222325)
FNV64_PRIME = np.uint64(0x100000001B3)
_MASK64 = (1 << 64) - 1

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    _HAVE_NUMBA = False

_env = os.environ.get("KIC_NUMBA", "").strip().lower()
_USE_NUMBA = _HAVE_NUMBA and _env not in {"0", "false", "off", "no"}


def backend() -> str:
    return "numba" if _USE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    """Test/benchmark hook; 'numba' requires numba to be importable."""
    global _USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _USE_NUMBA = name == "numba"


def _hash_accumulate_py(data: np.ndarray, nmin: int, nmax: int, seed: int, d: int) -> np.ndarray:
    acc = np.zeros(d, dtype=np.float64)
    nbytes = data.shape[0]
    # n-grams are counted in characters, not bytes: UTF-8 continuation bytes
    # (0b10xxxxxx) never start a character, so multi-byte chars hash as units
    starts = [i for i in range(nbytes) if (int(data[i]) & 0xC0) != 0x80]
    starts.append(nbytes)
    length = len(starts) - 1
    seed_bytes = [(seed >> (8 * i)) & 0xFF for i in range(8)]
    base = int(FNV64_OFFSET)
    for b in seed_bytes:
        base = ((base ^ b) * int(FNV64_PRIME)) & _MASK64
    lo = nmin if length >= nmin else length
    hi = min(nmax, length)
    for n in range(lo, hi + 1):
        for start in range(length - n + 1):
            h = base
            for j in range(starts[start], starts[start + n]):
                h = ((h ^ int(data[j])) * int(FNV64_PRIME)) & _MASK64
            acc[h % d] += -1.0 if (h >> 63) & 1 else 1.0
    return acc


def _matvec_f64_py(mat: np.ndarray, q: np.ndarray) -> np.ndarray:
    return mat.astype(np.float64) @ q.astype(np.float64)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _hash_accumulate_nb(data, nmin, nmax, seed, d):  # pragma: no cover - numba
        acc = np.zeros(d, dtype=np.float64)
        nbytes = data.shape[0]
        starts = np.empty(nbytes + 1, dtype=np.int64)
        length = 0
        for i in range(nbytes):
            if (data[i] & np.uint8(0xC0)) != np.uint8(0x80):
                starts[length] = i
                length += 1
        starts[length] = nbytes
        prime = FNV64_PRIME
        base = FNV64_OFFSET
        for i in range(8):
            b = np.uint64((seed >> np.uint64(8 * i)) & np.uint64(0xFF))
            base = (base ^ b) * prime
        lo = nmin if length >= nmin else length
        hi = min(nmax, length)
        for n in range(lo, hi + 1):
            for start in range(length - n + 1):
                h = base
                for j in range(starts[start], starts[start + n]):
                    h = (h ^ np.uint64(data[j])) * prime
                if (h >> np.uint64(63)) & np.uint64(1):
                    acc[h % np.uint64(d)] -= 1.0
                else:
                    acc[h % np.uint64(d)] += 1.0
        return acc

    @njit(cache=True)
    def _matvec_f64_nb(mat, q):  # pragma: no cover - numba
        n, d = mat.shape
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += np.float64(mat[i, j]) * q[j]
            out[i] = s
        return out


def hash_accumulate(data: bytes | np.ndarray, nmin: int, nmax: int, seed: int, d: int) -> np.ndarray:
    """Signed-bucket character n-gram accumulation over a UTF-8 payload (pre-norm)."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8) if isinstance(data, (bytes, bytearray)) else data
    if _USE_NUMBA:
        return _hash_accumulate_nb(arr, np.int64(nmin), np.int64(nmax), np.uint64(seed), np.int64(d))
    return _hash_accumulate_py(arr, nmin, nmax, seed, d)


def matvec_f64(mat: np.ndarray, q: np.ndarray) -> np.ndarray:
    """mat (n,d) float32 x query (d,) -> float64 scores."""
    if _USE_NUMBA:
        return _matvec_f64_nb(mat, q.astype(np.float64))
    return _matvec_f64_py(mat, q)


def order_hits(scores: np.ndarray, ids: np.ndarray, top_m: int) -> np.ndarray:
    """Row order for the top_m hits: score descending, ties by ascending id."""
    order = np.lexsort((ids, -scores))
    return order[:top_m]
