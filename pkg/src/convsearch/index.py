"""Frozen document-embedding store with exact top-K dot-product retrieval,
and an Okapi BM25 inverted index for sparse baselines.

Dense scores are float64 accumulations over float32-stored rows. BLAS
products only pre-select candidates; the returned scores always come from
the same per-row np.dot, so single-query, batched, and brute-force paths
agree bitwise (see dense_search).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, read_embeddings, write_embeddings

_CANDIDATE_SLACK = 16
_TIE_RTOL = 1e-9


class DenseIndex:
    """Read-only doc_id list plus a (n_docs, dim) float32 matrix."""

    def __init__(self, doc_ids: list[str], matrix: np.ndarray):
        if len(doc_ids) != len(set(doc_ids)):
            raise ValueError("duplicate doc_id in dense index")
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise ValueError("embedding matrix must be 2-D")
        if matrix.shape[0] != len(doc_ids):
            raise ValueError(f"{len(doc_ids)} ids vs {matrix.shape[0]} embedding rows")
        self.doc_ids = list(doc_ids)
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self._matrix64 = matrix.astype(np.float64)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def save(self, path) -> None:
        write_embeddings(path, self.doc_ids, self.matrix)

    @classmethod
    def load(cls, path) -> "DenseIndex":
        doc_ids, matrix = read_embeddings(path)
        return cls(doc_ids, matrix)


def build_dense_index(doc_ids, embeddings) -> DenseIndex:
    """Round 64-bit embeddings to nearest 32-bit and freeze them."""
    return DenseIndex(list(doc_ids), np.asarray(embeddings))


def _rank_candidates(index: DenseIndex, q64: np.ndarray, approx: np.ndarray,
                     k: int) -> list[tuple[str, float]]:
    """Exact (doc_id, score) top-k given approximate selection scores."""
    n = len(index)
    m = min(n, k + _CANDIDATE_SLACK)
    if m < n:
        kth = np.partition(approx, n - m)[n - m]
        tol = _TIE_RTOL * max(1.0, float(np.max(np.abs(approx))))
        cand = np.flatnonzero(approx >= kth - tol)
    else:
        cand = np.arange(n)
    mat = index._matrix64
    scored = [(index.doc_ids[i], float(np.dot(mat[i], q64))) for i in cand]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def _check_query(index: DenseIndex, q: np.ndarray) -> np.ndarray:
    q64 = np.ascontiguousarray(q, dtype=np.float64)
    if q64.shape != (index.dim,):
        raise ValueError(f"query dim {q64.shape} does not match index dim ({index.dim},)")
    return q64


def dense_search(index: DenseIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by dot product, descending; ties by doc_id ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    q64 = _check_query(index, query)
    approx = index._matrix64 @ q64
    return _rank_candidates(index, q64, approx, k)


def dense_search_batch(index: DenseIndex, queries: np.ndarray, k: int,
                       block: int = 256) -> list[list[tuple[str, float]]]:
    """Row i equals dense_search(queries[i]); selection uses blocked matmul."""
    if k < 1:
        raise ValueError("k must be >= 1")
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError("queries must be a 2-D array")
    if queries.shape[0] == 0:
        return []
    if queries.shape[1] != index.dim:
        raise ValueError(f"query dim {queries.shape[1]} does not match index dim {index.dim}")
    if len(index) == 0:
        return [[] for _ in range(queries.shape[0])]
    results: list[list[tuple[str, float]]] = []
    mat64 = index._matrix64
    for start in range(0, queries.shape[0], block):
        chunk = queries[start:start + block]
        approx = chunk @ mat64.T
        for row in range(chunk.shape[0]):
            results.append(_rank_candidates(index, chunk[row], approx[row], k))
    return results


@dataclass
class SparseIndex:
    """Okapi BM25 inverted index over token ids."""

    doc_ids: list[str]
    postings: dict[int, list[tuple[int, int]]]  # token -> [(doc index, tf)]
    doc_lengths: np.ndarray
    avgdl: float
    k1: float = 0.9
    b: float = 0.4

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    def idf(self, token: int) -> float:
        df = len(self.postings.get(token, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def build_sparse_index(corpus: Corpus, k1: float = 0.9, b: float = 0.4) -> SparseIndex:
    postings: dict[int, list[tuple[int, int]]] = {}
    lengths = []
    doc_ids = []
    for i, doc in enumerate(corpus):
        doc_ids.append(doc.doc_id)
        lengths.append(len(doc.tokens))
        counts: dict[int, int] = {}
        for tok in doc.tokens:
            counts[tok] = counts.get(tok, 0) + 1
        for tok, tf in counts.items():
            postings.setdefault(tok, []).append((i, tf))
    lengths_arr = np.asarray(lengths, dtype=np.int64)
    avgdl = float(lengths_arr.mean()) if len(lengths) else 0.0
    return SparseIndex(doc_ids, postings, lengths_arr, avgdl, k1, b)


def bm25_search(index: SparseIndex, query_tokens, k: int) -> list[tuple[str, float]]:
    """Okapi BM25 with query-term multiplicity; unknown terms contribute 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.n_docs == 0:
        return []
    scores: dict[int, float] = {}
    for token in query_tokens:
        plist = index.postings.get(token)
        if not plist:
            continue
        idf = index.idf(token)
        k1, b, avgdl = index.k1, index.b, index.avgdl
        for doc_idx, tf in plist:
            norm = tf + k1 * (1.0 - b + b * index.doc_lengths[doc_idx] / avgdl)
            scores[doc_idx] = scores.get(doc_idx, 0.0) + idf * tf / norm
    scored = [(index.doc_ids[i], s) for i, s in scores.items()]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]
