"""Iterative conversational query reformulation with retrieval rewards."""
from .embedding import EmbeddingStore, HashingEncoder, cosine, encode
from .estimator import IterCQR
from .pipeline import RunConfig, run_all
from .retrieval import BM25Retriever, DenseRetriever

__version__ = "0.1.0"

__all__ = [
    "BM25Retriever", "DenseRetriever", "EmbeddingStore", "HashingEncoder", "IterCQR",
    "RunConfig", "cosine", "encode", "run_all",
]
