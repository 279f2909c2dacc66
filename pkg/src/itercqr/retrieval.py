"""Off-the-shelf retrievers over reformulated queries and TREC run files."""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .embedding import EmbeddingStore, build_store, cosine_rows, encode
from .errors import FormatError, ValidationError
from .text import tokenize

BM25_FORMAT = "itercqr-bm25/1"


@dataclass
class RunEntry:
    query_id: str
    ranking: list[tuple[str, float]] = field(default_factory=list)
    tag: str = "itercqr"

    @property
    def passage_ids(self):
        return [pid for pid, _ in self.ranking]


def _rank(query_id, ids, scores, k, tag, keep_zero=True):
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    if not keep_zero:
        order = [i for i in order if scores[i] > 0]
    return RunEntry(query_id, [(ids[i], float(scores[i])) for i in order[:k]], tag)


def dense_search(query_text, store: EmbeddingStore, k=100, query_id="q", tag="dense"):
    """Exact top-k by cosine; ties by passage id."""
    if len(store) == 0:
        raise ValidationError("empty embedding store")
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores = cosine_rows(store.matrix, encode(query_text, store.dim))
    return _rank(query_id, store.ids, scores.tolist(), k, tag)


@dataclass
class BM25Index:
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    doc_ids: list[str]
    k1: float = 1.2
    b: float = 0.75

    @property
    def N(self):
        return len(self.doc_ids)

    @property
    def avgdl(self):
        return sum(self.doc_lengths) / len(self.doc_lengths) if self.doc_lengths else 0.0

    def df(self, term):
        return len(self.postings.get(term, ()))

    def idf(self, term):
        df = self.df(term)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def to_dict(self):
        return {
            "format": BM25_FORMAT,
            "k1": self.k1,
            "b": self.b,
            "doc_ids": self.doc_ids,
            "doc_lengths": self.doc_lengths,
            "postings": {t: [list(p) for p in plist] for t, plist in sorted(self.postings.items())},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != BM25_FORMAT:
            raise FormatError(f"unsupported BM25 index format {d.get('format')!r}")
        return cls(
            postings={t: [tuple(p) for p in plist] for t, plist in d["postings"].items()},
            doc_lengths=list(d["doc_lengths"]),
            doc_ids=list(d["doc_ids"]),
            k1=d["k1"],
            b=d["b"],
        )


def bm25_term_score(idf, tf, dl, avgdl, k1=1.2, b=0.75):
    return idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))


def bm25_build(passages, tokenizer=tokenize, k1=1.2, b=0.75):
    postings = defaultdict(list)
    doc_ids, doc_lengths, seen = [], [], set()
    for row, passage in enumerate(passages):
        if passage.passage_id in seen:
            raise ValidationError(f"duplicate passage id {passage.passage_id!r}")
        seen.add(passage.passage_id)
        tokens = tokenizer(passage.text)
        doc_ids.append(passage.passage_id)
        doc_lengths.append(len(tokens))
        for term, tf in sorted(Counter(tokens).items()):
            postings[term].append((row, tf))
    return BM25Index(dict(postings), doc_lengths, doc_ids, k1, b)


def bm25_search(index: BM25Index, query_text, k=100, query_id="q", tag="bm25", tokenizer=tokenize):
    scores = np.zeros(index.N)
    avgdl = index.avgdl
    for term in dict.fromkeys(tokenizer(query_text)):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for row, tf in plist:
            scores[row] += bm25_term_score(idf, tf, index.doc_lengths[row], avgdl, index.k1, index.b)
    return _rank(query_id, index.doc_ids, scores.tolist(), k, tag, keep_zero=False)


def save_bm25(index, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(index.to_dict(), fh)


def load_bm25(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return BM25Index.from_dict(json.load(fh))
        except (json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"{path}: bad BM25 index ({exc})") from exc


# ---------------------------------------------------------------- run files


def write_run(entries, path):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            for rank, (pid, score) in enumerate(entry.ranking, start=1):
                fh.write(f"{entry.query_id} Q0 {pid} {rank} {score:.6f} {entry.tag}\n")


def read_run(path):
    entries: dict[str, RunEntry] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, pid, rank, score, tag = parts
            try:
                rank, score = int(rank), float(score)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad rank/score") from exc
            entry = entries.setdefault(qid, RunEntry(qid, [], tag))
            if rank != len(entry.ranking) + 1:
                raise FormatError(
                    f"{path}:{lineno}: rank {rank} for {qid} breaks contiguity "
                    f"(expected {len(entry.ranking) + 1})"
                )
            if entry.ranking and score > entry.ranking[-1][1]:
                raise FormatError(f"{path}:{lineno}: scores must be non-increasing")
            if pid in entry.passage_ids:
                raise FormatError(f"{path}:{lineno}: duplicate passage {pid} for {qid}")
            entry.ranking.append((pid, score))
    return list(entries.values())


# ------------------------------------------------------ estimator wrappers


class DenseRetriever(BaseEstimator):
    """Exact cosine retriever. ``fit`` embeds the passages (or adopts ``store``)."""

    def __init__(self, dim=256, k=100):
        self.dim = dim
        self.k = k

    def fit(self, passages=None, y=None, store=None):
        if store is None:
            if passages is None:
                raise ValidationError("need passages or a prebuilt store")
            store = build_store(passages, self.dim)
        self.store_ = store
        return self

    def search(self, query_text, query_id="q"):
        check_is_fitted(self, "store_")
        return dense_search(query_text, self.store_, self.k, query_id)

    def predict(self, queries, query_ids=None):
        query_ids = query_ids or [str(i) for i in range(len(queries))]
        return [self.search(q, qid) for q, qid in zip(queries, query_ids)]


class BM25Retriever(BaseEstimator):
    def __init__(self, k1=1.2, b=0.75, k=100):
        self.k1 = k1
        self.b = b
        self.k = k

    def fit(self, passages, y=None):
        self.index_ = bm25_build(passages, k1=self.k1, b=self.b)
        return self

    def search(self, query_text, query_id="q"):
        check_is_fitted(self, "index_")
        return bm25_search(self.index_, query_text, self.k, query_id)

    def predict(self, queries, query_ids=None):
        query_ids = query_ids or [str(i) for i in range(len(queries))]
        return [self.search(q, qid) for q, qid in zip(queries, query_ids)]
