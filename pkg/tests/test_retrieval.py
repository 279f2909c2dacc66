import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itercqr.data import Passage
from itercqr.embedding import EmbeddingStore, build_store, encode
from itercqr.errors import FormatError, ValidationError
from itercqr.retrieval import (
    BM25Retriever,
    DenseRetriever,
    RunEntry,
    bm25_build,
    bm25_search,
    bm25_term_score,
    dense_search,
    load_bm25,
    read_run,
    save_bm25,
    write_run,
)

THREE_DOCS = [
    Passage("d1", "x x y z"),
    Passage("d2", "y z w v"),
    Passage("d3", "w v y z"),
]


# ------------------------------------------------------------------ dense


def test_dense_exact_text_ranks_first():
    passages = [Passage(f"p{i}", f"unique words number{i} here{i}") for i in range(6)]
    entry = dense_search(passages[3].text, build_store(passages), k=3)
    assert entry.passage_ids[0] == "p3"
    assert entry.ranking[0][1] == pytest.approx(1.0, abs=1e-5)


def test_dense_k_larger_than_corpus():
    passages = [Passage(f"p{i}", f"text {i}") for i in range(5)]
    assert len(dense_search("text", build_store(passages), k=100).ranking) == 5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_dense_is_top_k_of_full_sort(seed, k):
    rng = np.random.default_rng(seed)
    n, dim = 9, 6
    matrix = rng.normal(size=(n, dim)).astype(np.float32)
    matrix[rng.integers(0, n)] = matrix[rng.integers(0, n)]  # force a tie now and then
    store = EmbeddingStore([f"p{i}" for i in range(n)], matrix)
    q = encode("query words", dim).astype(np.float64)
    entry = dense_search("query words", store, k=k)
    m = matrix.astype(np.float64)
    assert np.linalg.norm(q) > 0
    cos = [float(m[i] @ q / (np.linalg.norm(m[i]) * np.linalg.norm(q))) for i in range(n)]
    expected = sorted(range(n), key=lambda i: (-cos[i], f"p{i}"))[:k]
    assert entry.passage_ids == [f"p{i}" for i in expected]
    assert [s for _, s in entry.ranking] == pytest.approx([cos[i] for i in expected], abs=1e-12)


def test_dense_retriever_estimator():
    passages = [Passage("a", "red apple"), Passage("b", "green pear")]
    r = DenseRetriever(k=1).fit(passages)
    assert r.get_params() == {"dim": 256, "k": 1}
    assert [e.passage_ids for e in r.predict(["green pear"], ["q1"])] == [["b"]]


# ------------------------------------------------------------------- BM25


def test_bm25_df_and_avgdl():
    index = bm25_build(THREE_DOCS)
    assert (index.df("x"), index.df("y"), index.df("w"), index.df("nope")) == (1, 3, 2, 0)
    assert index.avgdl == 4.0
    assert index.N == 3
    assert index.postings["z"] == [(0, 1), (1, 1), (2, 1)]


def test_bm25_rebuild_deterministic(tmp_path):
    a, b = bm25_build(THREE_DOCS), bm25_build(list(THREE_DOCS))
    assert a.to_dict() == b.to_dict()
    save_bm25(a, tmp_path / "i.json")
    assert load_bm25(tmp_path / "i.json").to_dict() == a.to_dict()


def test_bm25_duplicate_id():
    with pytest.raises(ValidationError):
        bm25_build([Passage("a", "x"), Passage("a", "y")])


def test_bm25_hand_value():
    # N=3, df=1, tf=2, dl=avgdl: ln(1 + 2.5/1.5) * 2*2.2/(2+1.2)
    expected = math.log(1 + 2.5 / 1.5) * (2 * 2.2) / (2 + 1.2)
    entry = bm25_search(bm25_build(THREE_DOCS), "x")
    assert entry.passage_ids == ["d1"]
    assert entry.ranking[0][1] == pytest.approx(expected, abs=1e-12)
    assert entry.ranking[0][1] == pytest.approx(1.3486402, abs=1e-7)


def test_bm25_absent_terms():
    index = bm25_build(THREE_DOCS)
    assert bm25_search(index, "nothing matches").ranking == []
    with_absent = bm25_search(index, "x nothing")
    assert with_absent.ranking == bm25_search(index, "x").ranking


def test_bm25_query_terms_deduplicated():
    index = bm25_build(THREE_DOCS)
    assert bm25_search(index, "x x x").ranking == bm25_search(index, "x").ranking


def test_bm25_ties_by_passage_id():
    index = bm25_build([Passage("b", "same text"), Passage("a", "same text")])
    assert bm25_search(index, "same").passage_ids == ["a", "b"]


def test_bm25_tf_twice_beats_once():
    index = bm25_build([Passage("one", "cat dog eel"), Passage("two", "cat cat eel")])
    assert bm25_search(index, "cat").passage_ids == ["two", "one"]


@settings(max_examples=500)
@given(
    idf=st.floats(0.01, 10),
    tf=st.integers(1, 50),
    dl=st.integers(1, 500),
    avgdl=st.floats(1, 500),
    k1=st.floats(0.1, 3),
    b=st.floats(0, 1),
)
def test_bm25_monotone_in_tf_and_dl(idf, tf, dl, avgdl, k1, b):
    base = bm25_term_score(idf, tf, dl, avgdl, k1, b)
    assert bm25_term_score(idf, tf + 1, dl, avgdl, k1, b) >= base
    assert bm25_term_score(idf, tf, dl + 1, avgdl, k1, b) <= base


def test_bm25_retriever_estimator():
    r = BM25Retriever(k=2).fit(THREE_DOCS)
    assert r.get_params() == {"b": 0.75, "k": 2, "k1": 1.2}
    assert r.predict(["x"], ["q"])[0].passage_ids == ["d1"]


# -------------------------------------------------------------- run files

GOLDEN = (
    "q1 Q0 p3 1 2.500000 demo\n"
    "q1 Q0 p1 2 1.250000 demo\n"
    "q2 Q0 p2 1 0.333333 demo\n"
)


def test_run_file_golden_bytes(tmp_path):
    entries = [
        RunEntry("q1", [("p3", 2.5), ("p1", 1.25)], "demo"),
        RunEntry("q2", [("p2", 1 / 3)], "demo"),
    ]
    write_run(entries, tmp_path / "run.trec")
    assert (tmp_path / "run.trec").read_text() == GOLDEN


def test_run_round_trip(tmp_path):
    entries = [RunEntry("q1", [("p3", 2.5), ("p1", 1.25)], "demo"), RunEntry("q2", [("p2", 0.333333)], "demo")]
    write_run(entries, tmp_path / "run.trec")
    assert read_run(tmp_path / "run.trec") == entries


@pytest.mark.parametrize(
    "text, lineno",
    [
        ("q1 Q0 p1 1 1.0 t\nq1 Q0 p2 3 0.5 t\n", 2),  # rank gap
        ("q1 Q0 p1 1 1.0 t\nq1 Q0 p2 2 3.0 t\n", 2),  # score increases
        ("q1 Q0 p1 1 1.0 t\nq1 Q0 p1 2 0.5 t\n", 2),  # duplicate passage
        ("q1 Q0 p1 1 1.0\n", 1),  # missing field
        ("q1 Q0 p1 one 1.0 t\n", 1),  # bad rank
    ],
)
def test_run_parse_errors_name_line(tmp_path, text, lineno):
    path = tmp_path / "bad.trec"
    path.write_text(text)
    with pytest.raises(FormatError, match=f":{lineno}:"):
        read_run(path)
