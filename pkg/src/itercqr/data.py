"""Conversational corpus schema, history serialization and dataset versions.

Sessions and passages are read from JSONL; every generated or bootstrapped
training set is materialized as a versioned JSONL file (one header line,
then one record per instance).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ValidationError
from .text import SEP

DATASET_FORMAT = "itercqr-dataset/1"
PROVENANCES = ("llm_bootstrap", "file", "generated")


@dataclass
class Turn:
    turn_index: int
    query: str
    answer: str = ""
    gold_passage_ids: list[str] = field(default_factory=list)
    topic_label: Optional[str] = None

    def __post_init__(self):
        if self.turn_index < 1:
            raise ValidationError(f"turn_index must be >= 1, got {self.turn_index}")
        if not self.query.strip():
            raise ValidationError(f"turn {self.turn_index} has an empty query")


@dataclass
class Session:
    session_id: str
    turns: list[Turn]

    def __post_init__(self):
        for expected, turn in enumerate(self.turns, start=1):
            if turn.turn_index != expected:
                raise ValidationError(
                    f"session {self.session_id}: turn indices must run 1..n, "
                    f"found {turn.turn_index} at position {expected}"
                )

    def to_dict(self):
        return {
            "session_id": self.session_id,
            "turns": [
                {
                    "turn": t.turn_index,
                    "query": t.query,
                    "answer": t.answer,
                    "gold_pids": list(t.gold_passage_ids),
                    "topic": t.topic_label,
                }
                for t in self.turns
            ],
        }

    @classmethod
    def from_dict(cls, d):
        turns = [
            Turn(
                turn_index=int(t["turn"]),
                query=t["query"],
                answer=t.get("answer", "") or "",
                gold_passage_ids=[str(p) for p in t.get("gold_pids", [])],
                topic_label=t.get("topic"),
            )
            for t in d["turns"]
        ]
        return cls(session_id=str(d["session_id"]), turns=turns)


@dataclass
class Passage:
    passage_id: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError(f"passage {self.passage_id} has empty text")


@dataclass
class ReformulationInstance:
    instance_id: str
    session_id: str
    turn_index: int
    current_query: str
    history_text: str
    gold_passage_ids: list[str] = field(default_factory=list)
    bootstrap_rewrite: Optional[str] = None
    topic_shift_by_label: Optional[bool] = None
    topic_shift_by_pid: Optional[bool] = None

    @property
    def model_input(self):
        """Current query followed by the serialized history."""
        if not self.history_text:
            return self.current_query
        return f"{self.current_query} {SEP} {self.history_text}"


@dataclass
class CandidateSet:
    """n generated candidates for one instance; one row of D_t for t >= 1."""

    texts: list[str]
    logprobs: list[float]
    rewards: Optional[list[float]] = None

    def __post_init__(self):
        if len(self.texts) != len(self.logprobs):
            raise ValidationError("texts and logprobs differ in length")
        if self.rewards is not None and len(self.rewards) != len(self.texts):
            raise ValidationError("rewards and texts differ in length")

    def __len__(self):
        return len(self.texts)


@dataclass
class DatasetRow:
    instance_id: str
    target: Optional[str] = None
    candidates: Optional[CandidateSet] = None


@dataclass
class DatasetVersion:
    iteration: int
    rows: list[DatasetRow]
    provenance: str
    n: int = 1
    generated_by: Optional[int] = None

    def __post_init__(self):
        if self.iteration < 0:
            raise ValidationError("iteration must be non-negative")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        for row in self.rows:
            if self.iteration == 0:
                if row.target is None:
                    raise ValidationError(f"D0 row {row.instance_id} has no target")
            elif row.candidates is None or len(row.candidates) != self.n:
                got = None if row.candidates is None else len(row.candidates)
                raise ValidationError(
                    f"row {row.instance_id}: expected {self.n} candidates, got {got}"
                )

    def check_instances(self, instances):
        known = {inst.instance_id for inst in instances}
        missing = [r.instance_id for r in self.rows if r.instance_id not in known]
        if missing:
            raise ValidationError(f"dataset rows without instances: {missing[:5]}")


# --------------------------------------------------------------------- I/O


def _read_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    return records


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_sessions(path):
    sessions, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        try:
            session = Session.from_dict(rec)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad session record ({exc})") from exc
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        if session.session_id in seen:
            raise ValidationError(f"duplicate session_id {session.session_id!r}")
        seen.add(session.session_id)
        sessions.append(session)
    return sessions


def load_passages(path):
    passages, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        try:
            passage = Passage(passage_id=str(rec["pid"]), text=rec["text"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad passage record ({exc})") from exc
        if passage.passage_id in seen:
            raise ValidationError(f"duplicate passage_id {passage.passage_id!r}")
        seen.add(passage.passage_id)
        passages.append(passage)
    return passages


def load_corpus(sessions_path, passages_path):
    return load_sessions(sessions_path), load_passages(passages_path)


def write_sessions(path, sessions):
    _write_jsonl(path, [s.to_dict() for s in sessions])


def write_passages(path, passages):
    _write_jsonl(path, [{"pid": p.passage_id, "text": p.text} for p in passages])


def write_qrels(path, qrels):
    """``qrels`` is an iterable of (query_id, passage_id) pairs."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid, pid in qrels:
            fh.write(f"{qid} 0 {pid} 1\n")


# ----------------------------------------------------------------- history


def build_history(session, k):
    """Serialize turns ``k-1 .. 1`` (most recent first) for turn ``k``."""
    if not 1 <= k <= len(session.turns):
        raise IndexError(f"turn {k} outside 1..{len(session.turns)} in {session.session_id}")
    parts = [
        f"question: {t.query} answer: {t.answer}".rstrip()
        for t in reversed(session.turns[: k - 1])
    ]
    return f" {SEP} ".join(parts)


def instance_id(session_id, turn_index):
    return f"{session_id}_{turn_index}"


def build_instances(sessions):
    instances = []
    for session in sessions:
        seen_pids: set[str] = set()
        prev_label = None
        for turn in session.turns:
            if turn.topic_label is None:
                by_label = None
            else:
                # first turn has no predecessor: counted as a shift
                by_label = turn.turn_index == 1 or turn.topic_label != prev_label
            by_pid = None
            if turn.gold_passage_ids:
                by_pid = not (set(turn.gold_passage_ids) & seen_pids)
            instances.append(
                ReformulationInstance(
                    instance_id=instance_id(session.session_id, turn.turn_index),
                    session_id=session.session_id,
                    turn_index=turn.turn_index,
                    current_query=turn.query,
                    history_text=build_history(session, turn.turn_index),
                    gold_passage_ids=list(turn.gold_passage_ids),
                    topic_shift_by_label=by_label,
                    topic_shift_by_pid=by_pid,
                )
            )
            seen_pids.update(turn.gold_passage_ids)
            prev_label = turn.topic_label
    return instances


def sample_fraction(instances, fraction, seed=0):
    """Low-resource subset: draw whole sessions until ``fraction`` of turns is covered."""
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return list(instances)
    order = list(dict.fromkeys(inst.session_id for inst in instances))
    sizes = {sid: 0 for sid in order}
    for inst in instances:
        sizes[inst.session_id] += 1
    rng = np.random.default_rng(seed)
    target = fraction * len(instances)
    chosen, covered = set(), 0
    for idx in rng.permutation(len(order)):
        if covered >= target - 1e-9:
            break
        sid = order[idx]
        chosen.add(sid)
        covered += sizes[sid]
    return [inst for inst in instances if inst.session_id in chosen]


def split_sessions(sessions, test_fraction, seed=0):
    """Deterministic session-level train/test split."""
    if not 0 <= test_fraction < 1:
        raise ValidationError(f"test_fraction must be in [0, 1), got {test_fraction}")
    n_test = int(round(test_fraction * len(sessions)))
    rng = np.random.default_rng(seed)
    test_idx = set(rng.permutation(len(sessions))[:n_test].tolist())
    train = [s for i, s in enumerate(sessions) if i not in test_idx]
    test = [s for i, s in enumerate(sessions) if i in test_idx]
    return train, test


# --------------------------------------------------------- dataset versions


def persist_dataset_version(version, path):
    header = {
        "format": DATASET_FORMAT,
        "iteration": version.iteration,
        "n": version.n,
        "provenance": version.provenance,
        "generated_by": version.generated_by,
    }
    records = [header]
    for row in version.rows:
        if version.iteration == 0:
            records.append({"instance_id": row.instance_id, "target": row.target})
        else:
            cs = row.candidates
            records.append(
                {
                    "instance_id": row.instance_id,
                    "candidates": [
                        {"text": t, "logprob": lp, "reward": None if cs.rewards is None else r}
                        for t, lp, r in zip(cs.texts, cs.logprobs, cs.rewards or [None] * len(cs))
                    ],
                }
            )
    _write_jsonl(path, records)


def load_dataset_version(path):
    records = _read_jsonl(path)
    if not records:
        raise FormatError(f"{path}: empty dataset file")
    _, header = records[0]
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: unsupported dataset format {header.get('format')!r}")
    try:
        iteration, n = int(header["iteration"]), int(header["n"])
        provenance = header["provenance"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}:1: bad header ({exc})") from exc
    rows = []
    for lineno, rec in records[1:]:
        try:
            if iteration == 0:
                rows.append(DatasetRow(rec["instance_id"], target=rec["target"]))
                continue
            cands = rec["candidates"]
            rewards = [c["reward"] for c in cands]
            cs = CandidateSet(
                texts=[c["text"] for c in cands],
                logprobs=[float(c["logprob"]) for c in cands],
                rewards=None if any(r is None for r in rewards) else [float(r) for r in rewards],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: bad dataset row ({exc})") from exc
        if len(cs) != n:
            raise FormatError(
                f"{path}:{lineno}: header says n={n} but row has {len(cs)} candidates"
            )
        rows.append(DatasetRow(rec["instance_id"], candidates=cs))
    try:
        return DatasetVersion(
            iteration=iteration,
            rows=rows,
            provenance=provenance,
            n=n,
            generated_by=header.get("generated_by"),
        )
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -------------------------------------------------------------- toy corpus

_ASPECTS = [
    ("when was {ref} founded", "founded by early settlers", "river trade post"),
    ("where is {ref} located", "located near the coast", "northern bay region"),
    ("what is the population of {ref}", "population census residents", "growing steadily"),
    ("who governs {ref}", "governed by elected council", "mayor assembly"),
    ("what language is spoken in {ref}", "language spoken dialect", "ancient script"),
    ("what is the climate of {ref}", "climate mild winters", "rainfall summer"),
    ("what is {ref} famous for", "famous landmark tourists", "cathedral festival"),
    ("what is the economy of {ref} based on", "economy industry exports", "textile mining"),
    ("what sports are popular in {ref}", "sports club stadium", "football rowing"),
    ("what food is typical in {ref}", "cuisine dishes cooking", "bread cheese"),
    ("how old is the university of {ref}", "university students campus", "medieval library"),
    ("what is the history of {ref}", "history medieval kingdom", "empire wars"),
]

_FILLER = (
    "amber bright cedar delta ember fable garnet harbor ivory jasper kestrel lumen "
    "maple nimbus onyx pebble quartz raven sable tundra umber velvet willow yarrow "
    "zephyr acorn birch coral dune fern glacier heath inlet juniper knoll lagoon "
    "meadow north orchard prairie quarry ridge summit thicket upland vale wharf"
).split()

_SYLLABLES = "ka lo ri ve sa mun tor el dri ba quen zi pha nor ul tes mi ra gor vin".split()


def _entity_names(count, rng):
    names: list[str] = []
    seen: set[str] = set()
    while len(names) < count:
        parts = rng.choice(len(_SYLLABLES), size=3)
        name = "".join(_SYLLABLES[i] for i in parts)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def generate_toy_corpus(seed=0, num_sessions=40, turns_per_session=4, entity_vocab_size=None):
    """Synthetic coreference corpus: a named entity in turn 1, pronouns afterwards.

    Every turn asks about a different aspect of the session's entity; its gold
    passage holds the entity name, shared aspect words and passage-specific
    filler, so the pronoun must be resolved to single out the right passage.
    Returns ``(sessions, passages, qrels)`` with qrels as (qid, pid) pairs.
    """
    if entity_vocab_size is None:
        entity_vocab_size = num_sessions
    if min(num_sessions, turns_per_session, entity_vocab_size) <= 0:
        raise ValidationError("all toy corpus counts must be positive")
    if entity_vocab_size < num_sessions:
        raise ValidationError(
            f"entity_vocab_size={entity_vocab_size} < num_sessions={num_sessions}"
        )
    if turns_per_session > len(_ASPECTS):
        raise ValidationError(f"at most {len(_ASPECTS)} turns per session supported")
    rng = np.random.default_rng(seed)
    vocab = _entity_names(entity_vocab_size, rng)
    entities = [vocab[i] for i in rng.permutation(entity_vocab_size)[:num_sessions]]

    sessions, passages, qrels = [], [], []
    width = max(3, len(str(num_sessions - 1)))
    for s_idx, entity in enumerate(entities):
        sid = f"s{s_idx:0{width}d}"
        pronoun = "it" if rng.random() < 0.5 else "they"
        aspects = rng.permutation(len(_ASPECTS))[:turns_per_session]
        turns = []
        for k, a_idx in enumerate(aspects, start=1):
            template, aspect_words, answer_words = _ASPECTS[a_idx]
            ref = entity if k == 1 else pronoun
            filler = " ".join(_FILLER[i] for i in rng.choice(len(_FILLER), size=3, replace=False))
            pid = f"{sid}-p{k}"
            passages.append(Passage(pid, f"{entity} {aspect_words} {answer_words} {filler}"))
            turns.append(
                Turn(
                    turn_index=k,
                    query=template.format(ref=ref),
                    answer=f"{answer_words} {filler}",
                    gold_passage_ids=[pid],
                    topic_label=entity,
                )
            )
            qrels.append((instance_id(sid, k), pid))
        sessions.append(Session(sid, turns))
    return sessions, passages, qrels


_PRONOUNS = ("it", "they")


def toy_rewrites(sessions, resolve_fraction=0.5, seed=0):
    """Rule-based "imperfect resolver": swap the pronoun for the topic entity on a
    fixed fraction of the follow-up turns and copy the query verbatim elsewhere.

    Returns ``{instance_id: rewrite}`` for every turn.
    """
    rewrites, eligible = {}, []
    for session in sessions:
        for turn in session.turns:
            iid = instance_id(session.session_id, turn.turn_index)
            rewrites[iid] = turn.query
            words = turn.query.split()
            if turn.turn_index > 1 and turn.topic_label and any(w in _PRONOUNS for w in words):
                eligible.append((iid, words, turn.topic_label))
    rng = np.random.default_rng(seed)
    n_resolve = int(math.floor(resolve_fraction * len(eligible) + 0.5))
    for idx in sorted(rng.permutation(len(eligible))[:n_resolve].tolist()):
        iid, words, entity = eligible[idx]
        rewrites[iid] = " ".join(entity if w in _PRONOUNS else w for w in words)
    return rewrites
