"""Binary-relevance retrieval metrics (pytrec_eval semantics) and slicing."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import FormatError, ValidationError
from .retrieval import read_run

METRICS = ("mrr", "ndcg@3", "recall@10", "recall@100")
SLICE_CRITERIA = {"label": "topic_shift_by_label", "pid": "topic_shift_by_pid"}


def load_qrels(path):
    qrels: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected '<qid> 0 <pid> <rel>'")
            qid, _, pid, rel = parts
            try:
                rel = int(rel)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad relevance {rel!r}") from exc
            if rel > 0:
                qrels.setdefault(qid, set()).add(pid)
    return qrels


def _ids(run_entry):
    if hasattr(run_entry, "passage_ids"):
        return run_entry.passage_ids
    return list(run_entry)


def mrr(run_entry, relevant):
    for rank, pid in enumerate(_ids(run_entry), start=1):
        if pid in relevant:
            return 1.0 / rank
    return 0.0


def ndcg_at_3(run_entry, relevant, cutoff=3):
    ranked = _ids(run_entry)[:cutoff]
    dcg = sum(1.0 / math.log2(i + 2) for i, pid in enumerate(ranked) if pid in relevant)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(relevant), cutoff)))
    return dcg / ideal if ideal > 0 else 0.0


def recall_at_k(run_entry, relevant, k):
    if not relevant:
        return 0.0
    return len(set(_ids(run_entry)[:k]) & set(relevant)) / len(relevant)


def query_metrics(run_entry, relevant):
    return {
        "mrr": mrr(run_entry, relevant),
        "ndcg@3": ndcg_at_3(run_entry, relevant),
        "recall@10": recall_at_k(run_entry, relevant, 10),
        "recall@100": recall_at_k(run_entry, relevant, 100),
    }


@dataclass
class MetricReport:
    slice: str
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def num_queries(self):
        return len(self.per_query)

    def mean(self, metric):
        if not self.per_query:
            return None
        return sum(q[metric] for q in self.per_query.values()) / len(self.per_query)

    def to_dict(self):
        out = {"slice": self.slice, "num_queries": self.num_queries}
        out.update({m: self.mean(m) for m in METRICS})
        return out


def evaluate_entries(entries, qrels, slice_name="all"):
    """Score every run query that has judgments. Returns (report, #excluded)."""
    report = MetricReport(slice_name)
    excluded = 0
    for entry in entries:
        relevant = qrels.get(entry.query_id)
        if not relevant:
            excluded += 1
            continue
        report.per_query[entry.query_id] = query_metrics(entry, relevant)
    return report, excluded


def evaluate_run(run_path, qrels_path, instances=None, slices=()):
    """Overall report plus shifted/concentrated reports per requested criterion."""
    entries = read_run(run_path)
    qrels = load_qrels(qrels_path)
    if entries and not {e.query_id for e in entries} & set(qrels):
        raise ValidationError("run and qrels share no query ids (id scheme mismatch?)")
    overall, _ = evaluate_entries(entries, qrels)
    reports = [overall]
    if slices and instances is None:
        raise ValidationError("slicing needs the instances that carry topic-shift flags")
    by_id = {inst.instance_id: inst for inst in instances or ()}
    for criterion in slices:
        if criterion not in SLICE_CRITERIA:
            raise ValidationError(f"unknown slice criterion {criterion!r}")
        attr = SLICE_CRITERIA[criterion]
        shifted = MetricReport(f"{criterion}:shifted")
        concentrated = MetricReport(f"{criterion}:concentrated")
        for qid, values in overall.per_query.items():
            flag = getattr(by_id[qid], attr) if qid in by_id else None
            if flag is None:
                continue
            (shifted if flag else concentrated).per_query[qid] = values
        reports += [shifted, concentrated]
    return reports


def write_report(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
