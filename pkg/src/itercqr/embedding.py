"""Frozen hashing text encoder, cosine similarity and the embedding store.

The encoder stands in for a pretrained dense retriever: it is a pure function
of the text, so passage vectors can be computed once and reused for rewards
and dense search alike.
"""
from __future__ import annotations

import json
import re
import struct
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import FormatError, ValidationError

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

STORE_MAGIC = b"ITCQEMB1"
_SPLIT_RE = re.compile(r"[^\W_]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def _bucket_sign(feature: str, dim: int):
    h = fnv1a_64(feature.encode("utf-8"))
    return h % dim, (-1.0 if h >> 63 else 1.0)


def features(text: str) -> list[str]:
    """Unigrams plus adjacent-token bigrams joined by ``_``."""
    tokens = _SPLIT_RE.findall(text.lower())
    return tokens + [f"{a}_{b}" for a, b in zip(tokens, tokens[1:])]


def encode(text: str, dim: int = 256) -> np.ndarray:
    """Signed feature hashing, L2-normalized; empty text gives the zero vector."""
    acc = np.zeros(dim, dtype=np.float64)
    for feat in features(text):
        bucket, sign = _bucket_sign(feat, dim)
        acc[bucket] += sign
    norm = np.linalg.norm(acc)
    if norm > 0:
        acc /= norm
    return acc.astype(np.float32)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_rows(matrix, vector) -> np.ndarray:
    """Cosine of ``vector`` against every row of ``matrix`` (zero rows score 0)."""
    m = np.asarray(matrix, dtype=np.float64)
    v = np.asarray(vector, dtype=np.float64)
    nv = np.linalg.norm(v)
    norms = np.linalg.norm(m, axis=1)
    out = np.zeros(m.shape[0])
    if nv == 0:
        return out
    ok = norms > 0
    out[ok] = (m[ok] @ v) / (norms[ok] * nv)
    return np.clip(out, -1.0, 1.0)


class HashingEncoder(TransformerMixin, BaseEstimator):
    """Stateless text -> unit vector transformer (sklearn API).

    :param dim: number of hash buckets / embedding dimension
    """

    def __init__(self, dim=256):
        self.dim = dim

    def fit(self, X=None, y=None):
        if self.dim < 1:
            raise ValidationError("dim must be positive")
        return self

    def transform(self, X):
        if isinstance(X, str):
            raise ValidationError("expected an iterable of texts, got a single string")
        texts = list(X)
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = encode(text, self.dim)
        return out

    def encode(self, text):
        return encode(text, self.dim)


class EmbeddingStore:
    """Immutable id -> unit vector table backed by one float32 matrix."""

    def __init__(self, ids, matrix):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValidationError("matrix rows must match the number of ids")
        self.id_to_row = {}
        for row, pid in enumerate(ids):
            if pid in self.id_to_row:
                raise ValidationError(f"duplicate id {pid!r} in embedding store")
            self.id_to_row[pid] = row
        self.ids = list(ids)
        self.matrix = matrix
        self.matrix.setflags(write=False)

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, pid):
        return pid in self.id_to_row

    def vector(self, pid):
        return self.matrix[self.id_to_row[pid]]

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingStore)
            and self.ids == other.ids
            and self.matrix.shape == other.matrix.shape
            and self.matrix.tobytes() == other.matrix.tobytes()
        )


def build_store(passages, dim=256):
    ids = [p.passage_id for p in passages]
    enc = HashingEncoder(dim).fit()
    return EmbeddingStore(ids, enc.transform(p.text for p in passages))


def persist_store(store, path):
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<IQ", store.dim, len(store)))
        fh.write(store.matrix.astype("<f4").tobytes())
        fh.write(json.dumps(store.id_to_row, sort_keys=True).encode("utf-8"))


def load_store(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated header at offset 8")
    dim, rows = struct.unpack_from("<IQ", blob, 8)
    start, nbytes = 20, 4 * dim * rows
    if len(blob) < start + nbytes:
        raise FormatError(f"{path}: matrix truncated at offset {len(blob)} (need {start + nbytes})")
    matrix = np.frombuffer(blob, dtype="<f4", count=dim * rows, offset=start).reshape(rows, dim)
    try:
        id_to_row = json.loads(blob[start + nbytes:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad id map at offset {start + nbytes}") from exc
    if not isinstance(id_to_row, dict) or len(id_to_row) != rows:
        raise FormatError(
            f"{path}: id map at offset {start + nbytes} lists "
            f"{len(id_to_row) if isinstance(id_to_row, dict) else '?'} ids for {rows} rows"
        )
    ids = [None] * rows
    for pid, row in id_to_row.items():
        if not isinstance(row, int) or not 0 <= row < rows or ids[row] is not None:
            raise FormatError(f"{path}: id map is not a bijection (id {pid!r})")
        ids[row] = pid
    return EmbeddingStore(ids, matrix.astype(np.float32))
