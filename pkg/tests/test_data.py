import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_session
from itercqr.data import (
    CandidateSet,
    DatasetRow,
    DatasetVersion,
    build_history,
    build_instances,
    generate_toy_corpus,
    load_corpus,
    load_dataset_version,
    load_passages,
    load_sessions,
    persist_dataset_version,
    sample_fraction,
    split_sessions,
    toy_rewrites,
    write_sessions,
)
from itercqr.errors import FormatError, ValidationError


def _three_turn():
    return make_session(
        "s",
        ("q1", "a1", ["p1"], "t1"),
        ("q2", "a2", ["p2"], "t1"),
        ("q3", "", ["p1"], "t2"),
    )


# ------------------------------------------------------------------- I/O


def test_load_corpus_fixture(tmp_path):
    sessions = [_three_turn(), make_session("u", ("hello", "hi", [], None))]
    write_sessions(tmp_path / "s.jsonl", sessions)
    (tmp_path / "p.jsonl").write_text('{"pid": "p1", "text": "one"}\n{"pid": "p2", "text": "two"}\n')
    loaded, passages = load_corpus(tmp_path / "s.jsonl", tmp_path / "p.jsonl")
    assert [len(s.turns) for s in loaded] == [3, 1]
    assert loaded == sessions
    assert [p.passage_id for p in passages] == ["p1", "p2"]


def test_session_schema_keys(tmp_path):
    write_sessions(tmp_path / "s.jsonl", [_three_turn()])
    rec = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"session_id", "turns"}
    assert set(rec["turns"][0]) == {"turn", "query", "answer", "gold_pids", "topic"}


def test_duplicate_passage_id_named(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"pid": "p7", "text": "a"}\n{"pid": "p7", "text": "b"}\n')
    with pytest.raises(ValidationError, match="p7"):
        load_passages(tmp_path / "p.jsonl")


def test_empty_sessions_file(tmp_path):
    (tmp_path / "s.jsonl").write_text("")
    assert load_sessions(tmp_path / "s.jsonl") == []


def test_malformed_line_reports_line_number(tmp_path):
    good = json.dumps(_three_turn().to_dict())
    (tmp_path / "s.jsonl").write_text(good + "\n{not json\n")
    with pytest.raises(FormatError, match=":2:"):
        load_sessions(tmp_path / "s.jsonl")


def test_turn_invariants():
    with pytest.raises(ValidationError):
        make_session("s", ("  ", "a", [], None))
    from itercqr.data import Session, Turn

    with pytest.raises(ValidationError):
        Session("s", [Turn(1, "a"), Turn(3, "b")])


# ---------------------------------------------------------------- history


def test_history_examples():
    s = _three_turn()
    assert build_history(s, 1) == ""
    assert build_history(s, 2) == "question: q1 answer: a1"
    assert build_history(s, 3) == "question: q2 answer: a2 <sep> question: q1 answer: a1"


def test_history_out_of_range():
    with pytest.raises(IndexError):
        build_history(_three_turn(), 4)
    with pytest.raises(IndexError):
        build_history(_three_turn(), 0)


@given(st.integers(1, 13))
def test_history_marker_counts(n):
    s = make_session("s", *[(f"q{i}", f"a{i}", [], None) for i in range(n)])
    for inst in build_instances([s]):
        k = inst.turn_index
        assert inst.history_text.count("question:") == k - 1
        assert inst.history_text.count("answer:") == k - 1
        assert (inst.history_text == "") == (k == 1)


# -------------------------------------------------------------- instances


def test_instances_one_per_turn():
    s = make_session("s", *[(f"q{i}", "a", [f"p{i}"], "t") for i in range(13)])
    insts = build_instances([s])
    assert len(insts) == 13
    assert len({i.instance_id for i in insts}) == 13


def test_topic_shift_flags():
    insts = build_instances([_three_turn()])
    assert [i.topic_shift_by_label for i in insts] == [True, False, True]
    # turn 3's gold p1 was already seen at turn 1
    assert [i.topic_shift_by_pid for i in insts] == [True, True, False]


def test_no_gold_means_unknown_pid_shift():
    insts = build_instances([make_session("s", ("q", "a", [], None))])
    assert insts[0].topic_shift_by_pid is None and insts[0].topic_shift_by_label is None


@settings(max_examples=100)
@given(st.lists(st.lists(st.sampled_from("abcde"), max_size=3), min_size=1, max_size=8))
def test_pid_shift_rule(golds):
    s = make_session("s", *[(f"q{i}", "a", g, None) for i, g in enumerate(golds)])
    seen = set()
    for inst, g in zip(build_instances([s]), golds):
        if g:
            assert inst.topic_shift_by_pid == (not set(g) & seen)
        seen |= set(g)


def test_model_input_layout():
    insts = build_instances([_three_turn()])
    assert insts[0].model_input == "q1"
    assert insts[1].model_input == "q2 <sep> question: q1 answer: a1"


# --------------------------------------------------------------- sampling


def _equal_sessions(n=10):
    return build_instances([make_session(f"s{i}", ("q", "a", [], None), ("r", "b", [], None)) for i in range(n)])


def test_sample_fraction_identity_and_determinism():
    insts = _equal_sessions()
    assert sample_fraction(insts, 1.0) == insts
    assert sample_fraction(insts, 0.5, seed=7) == sample_fraction(insts, 0.5, seed=7)


def test_sample_fraction_whole_sessions():
    picked = sample_fraction(_equal_sessions(), 0.2, seed=3)
    assert len({i.session_id for i in picked}) == 2
    assert len(picked) == 4


@pytest.mark.parametrize("bad", [0, -0.1, 1.5])
def test_sample_fraction_bounds(bad):
    with pytest.raises(ValidationError):
        sample_fraction(_equal_sessions(), bad)


def test_split_sessions_disjoint_and_seeded():
    sessions = generate_toy_corpus(0, 12, 2)[0]
    train, test = split_sessions(sessions, 0.25, 0)
    assert len(test) == 3 and len(train) == 9
    assert not {s.session_id for s in train} & {s.session_id for s in test}
    assert split_sessions(sessions, 0.25, 0) == (train, test)


# ------------------------------------------------------- dataset versions


def test_round_trip_d0(tmp_path):
    d0 = DatasetVersion(0, [DatasetRow(f"i{k}", target=f"rewrite {k}") for k in range(3)], "file")
    persist_dataset_version(d0, tmp_path / "d0.jsonl")
    assert load_dataset_version(tmp_path / "d0.jsonl") == d0


def _d2(n=10):
    rows = [
        DatasetRow(
            f"i{k}",
            candidates=CandidateSet([f"c{j}" for j in range(n)], [-0.5 * j for j in range(n)], [j / n for j in range(n)]),
        )
        for k in range(3)
    ]
    return DatasetVersion(2, rows, "generated", n=n, generated_by=1)


def test_round_trip_d2(tmp_path):
    persist_dataset_version(_d2(), tmp_path / "d2.jsonl")
    loaded = load_dataset_version(tmp_path / "d2.jsonl")
    assert loaded == _d2()
    assert all(len(r.candidates) == 10 for r in loaded.rows)


text_st = st.text(alphabet="abc <>é\"\\", max_size=12)


@settings(max_examples=60, deadline=None)
@given(
    t=st.integers(0, 4),
    n=st.integers(1, 4),
    rows=st.integers(0, 4),
    data=st.data(),
)
def test_round_trip_property(tmp_path_factory, t, n, rows, data):
    if t == 0:
        version = DatasetVersion(0, [DatasetRow(f"i{k}", target=data.draw(text_st)) for k in range(rows)], "file")
    else:
        floats = st.floats(-50, 0, allow_nan=False)
        built = []
        for k in range(rows):
            rewards = data.draw(st.one_of(st.none(), st.lists(st.floats(-1, 1), min_size=n, max_size=n)))
            built.append(
                DatasetRow(
                    f"i{k}",
                    candidates=CandidateSet(
                        data.draw(st.lists(text_st, min_size=n, max_size=n)),
                        data.draw(st.lists(floats, min_size=n, max_size=n)),
                        rewards,
                    ),
                )
            )
        version = DatasetVersion(t, built, "generated", n=n, generated_by=t - 1)
    path = tmp_path_factory.mktemp("dv") / "d.jsonl"
    persist_dataset_version(version, path)
    assert load_dataset_version(path) == version


def test_candidate_count_mismatch(tmp_path):
    path = tmp_path / "d1.jsonl"
    persist_dataset_version(_d2(), path)
    lines = path.read_text().splitlines()
    row = json.loads(lines[2])
    row["candidates"] = row["candidates"][:9]
    lines[2] = json.dumps(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match="n=10"):
        load_dataset_version(path)


def test_format_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"format": "other/9", "iteration": 0, "n": 1, "provenance": "file"}\n')
    with pytest.raises(FormatError):
        load_dataset_version(path)


# -------------------------------------------------------------- toy corpus


def test_toy_corpus_counts():
    sessions, passages, qrels = generate_toy_corpus(0, 4, 3)
    assert len(build_instances(sessions)) == 12
    assert len(qrels) == 12 and len(passages) == 12


def test_toy_corpus_coreference_structure():
    sessions, passages, _ = generate_toy_corpus(0, 6, 4)
    texts = {p.passage_id: p.text for p in passages}
    for s in sessions:
        entity = s.turns[0].topic_label
        assert entity in s.turns[0].query.split()
        for turn in s.turns[1:]:
            words = turn.query.split()
            assert entity not in words
            assert {"it", "they"} & set(words)
        for turn in s.turns:
            assert entity in texts[turn.gold_passage_ids[0]].split()


def test_toy_corpus_deterministic_and_validated():
    assert generate_toy_corpus(5, 3, 2) == generate_toy_corpus(5, 3, 2)
    with pytest.raises(ValidationError):
        generate_toy_corpus(0, 5, 2, entity_vocab_size=4)


def test_toy_rewrites_resolve_half():
    sessions = generate_toy_corpus(0, 10, 4)[0]
    rewrites = toy_rewrites(sessions, 0.5, seed=0)
    follow_ups = [(s, t) for s in sessions for t in s.turns if t.turn_index > 1]
    resolved = [t for s, t in follow_ups if rewrites[f"{s.session_id}_{t.turn_index}"] != t.query]
    assert len(resolved) == len(follow_ups) // 2
    for s in sessions:
        assert rewrites[f"{s.session_id}_1"] == s.turns[0].query
