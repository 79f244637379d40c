"""Dense search against the brute-force oracle; BM25 hand fixtures."""

import math

import numpy as np
import pytest

from convsearch.corpus import Corpus, Document, Vocab
from convsearch.index import (
    DenseIndex,
    bm25_search,
    build_dense_index,
    build_sparse_index,
    dense_search,
    dense_search_batch,
)


def brute_force(index: DenseIndex, query: np.ndarray, k: int):
    """Independent oracle: full per-row scan, stable lexicographic sort."""
    q64 = np.asarray(query, dtype=np.float64)
    scored = [(index.doc_ids[i], float(np.dot(index._matrix64[i], q64)))
              for i in range(len(index))]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def random_index(rng, n, dim):
    ids = [f"D{i:06d}" for i in range(n)]
    return build_dense_index(ids, rng.standard_normal((n, dim)))


class TestBuild:
    def test_empty_index_searches_empty(self):
        index = build_dense_index([], np.zeros((0, 8)))
        assert dense_search(index, np.zeros(8), 5) == []
        assert dense_search_batch(index, np.zeros((3, 8)), 5) == [[], [], []]

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            build_dense_index(["D1", "D1"], np.zeros((2, 4)))

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            build_dense_index(["D1"], np.zeros((2, 4)))

    def test_save_load_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        index = random_index(rng, 50, 8)
        index.save(tmp_path / "emb.cdr1")
        loaded = DenseIndex.load(tmp_path / "emb.cdr1")
        assert loaded.doc_ids == index.doc_ids
        assert np.array_equal(loaded.matrix, index.matrix)

    def test_matrix_stored_float32(self):
        index = build_dense_index(["D1"], np.array([[0.1, 0.2]]))
        assert index.matrix.dtype == np.float32


class TestDenseSearch:
    def test_self_retrieval_1000_docs(self):
        rng = np.random.default_rng(11)
        index = random_index(rng, 1000, 16)
        for i in (0, 13, 999):
            top = dense_search(index, index.matrix[i].astype(np.float64), 1)
            assert top[0][0] == index.doc_ids[i]

    def test_zero_query_ties_by_doc_id(self):
        rng = np.random.default_rng(2)
        index = random_index(rng, 40, 8)
        result = dense_search(index, np.zeros(8), 10)
        assert [d for d, _ in result] == [f"D{i:06d}" for i in range(10)]
        assert all(s == 0.0 for _, s in result)

    def test_orthonormal_rows_unit_score(self):
        index = build_dense_index([f"D{i}" for i in range(5)], np.eye(5))
        top = dense_search(index, np.eye(5)[3], 1)
        assert top == [("D3", 1.0)]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            n = int(rng.integers(5, 2000))
            dim = int(rng.choice([4, 16, 64]))
            index = random_index(rng, n, dim)
            q = rng.standard_normal(dim)
            for k in (1, 10, 100):
                assert dense_search(index, q, k) == brute_force(index, q, k)

    def test_duplicate_rows_tie_order(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal((20, 8))
        base[7] = base[3]
        base[15] = base[3]
        index = build_dense_index([f"D{i:02d}" for i in range(20)], base)
        q = rng.standard_normal(8)
        assert dense_search(index, q, 20) == brute_force(index, q, 20)

    def test_k_larger_than_corpus(self):
        rng = np.random.default_rng(1)
        index = random_index(rng, 7, 4)
        assert len(dense_search(index, rng.standard_normal(4), 50)) == 7

    def test_dim_mismatch_rejected(self):
        rng = np.random.default_rng(1)
        index = random_index(rng, 5, 4)
        with pytest.raises(ValueError):
            dense_search(index, np.zeros(5), 3)
        with pytest.raises(ValueError):
            dense_search_batch(index, np.zeros((2, 3)), 3)

    def test_k_must_be_positive(self):
        rng = np.random.default_rng(1)
        index = random_index(rng, 5, 4)
        with pytest.raises(ValueError):
            dense_search(index, np.zeros(4), 0)


class TestDenseSearchBatch:
    def test_batch_of_one_equals_single(self):
        rng = np.random.default_rng(3)
        index = random_index(rng, 500, 16)
        q = rng.standard_normal(16)
        assert dense_search_batch(index, q[None], 20) == [dense_search(index, q, 20)]

    def test_batch_rows_equal_single_bitwise(self):
        rng = np.random.default_rng(17)
        index = random_index(rng, 3000, 32)
        queries = rng.standard_normal((64, 32))
        batch = dense_search_batch(index, queries, 25)
        for i in range(64):
            assert batch[i] == dense_search(index, queries[i], 25)

    def test_blocking_does_not_change_results(self):
        rng = np.random.default_rng(23)
        index = random_index(rng, 800, 16)
        queries = rng.standard_normal((10, 16))
        assert dense_search_batch(index, queries, 9, block=3) == \
            dense_search_batch(index, queries, 9, block=256)

    def test_empty_batch(self):
        rng = np.random.default_rng(1)
        index = random_index(rng, 5, 4)
        assert dense_search_batch(index, np.zeros((0, 4)), 3) == []


def tiny_corpus(texts, vocab):
    docs = []
    for i, text in enumerate(texts):
        docs.append(Document(f"D{i:02d}", [vocab.id(w) for w in text.split()]))
    return Corpus(docs)


def word_vocab(words):
    v = Vocab()
    for w in words:
        v.add(w, "topic")
    return v


class TestBm25:
    def test_no_indexed_terms_empty_result(self):
        v = word_vocab(["a", "b", "c"])
        index = build_sparse_index(tiny_corpus(["a b", "b c"], v))
        assert bm25_search(index, [v.id("c") + 99], 5) == []

    def test_hand_formula_single_doc(self):
        # N=1, df=1, tf=1, len=avgdl=2:
        #   idf = ln((1-1+0.5)/(1+0.5) + 1), norm = 1 + 0.9*(1-0.4+0.4*1)
        v = word_vocab(["a", "b"])
        index = build_sparse_index(tiny_corpus(["a b"], v), k1=0.9, b=0.4)
        result = bm25_search(index, [v.id("a")], 5)
        expected = math.log(0.5 / 1.5 + 1) * (1 / (1 + 0.9 * 1))
        assert len(result) == 1
        assert result[0][0] == "D00"
        assert result[0][1] == pytest.approx(expected, abs=1e-12)

    def test_query_multiplicity_multiplies_contribution(self):
        v = word_vocab(["a", "b"])
        index = build_sparse_index(tiny_corpus(["a b", "b b"], v))
        single = bm25_search(index, [v.id("a")], 5)[0][1]
        double = bm25_search(index, [v.id("a"), v.id("a")], 5)[0][1]
        assert double == pytest.approx(2 * single, abs=1e-12)

    def test_full_doc_beats_term_removed_variant(self):
        rng = np.random.default_rng(9)
        words = [f"w{i}" for i in range(30)]
        v = word_vocab(words)
        for _ in range(20):
            base = [words[int(i)] for i in rng.integers(0, 30, size=8)]
            query_terms = sorted(set(base))[:4]
            reduced = list(base)
            reduced.remove(query_terms[0])
            texts = [" ".join([words[int(i)] for i in rng.integers(0, 30, size=rng.integers(3, 10))])
                     for _ in range(20)]
            corpus = tiny_corpus(texts + [" ".join(base), " ".join(reduced)], v)
            index = build_sparse_index(corpus)
            scores = dict(bm25_search(index, [v.id(w) for w in query_terms], len(corpus)))
            full_id, reduced_id = "D20", "D21"
            assert scores[full_id] >= scores.get(reduced_id, 0.0)

    def test_ties_broken_by_doc_id(self):
        v = word_vocab(["a", "b"])
        index = build_sparse_index(tiny_corpus(["a b", "a b"], v))
        result = bm25_search(index, [v.id("a")], 5)
        assert [d for d, _ in result] == ["D00", "D01"]
        assert result[0][1] == result[1][1]

    def test_top_k_limit(self):
        v = word_vocab(["a"])
        index = build_sparse_index(tiny_corpus(["a"] * 10, v))
        assert len(bm25_search(index, [v.id("a")], 3)) == 3
