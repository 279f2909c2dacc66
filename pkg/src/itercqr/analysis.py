"""Per-iteration diagnostics of reformulated queries."""
from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import ValidationError
from .text import SEP, tokenize

STAT_FIELDS = ("dice_history", "dice_gold", "token_length", "distinct_3gram_ratio")
_HISTORY_MARKUP = re.compile(r"\b(?:question|answer):|" + re.escape(SEP))


@dataclass
class QueryStats:
    iteration: int
    dice_history: float
    dice_gold: float
    token_length: float
    distinct_3gram_ratio: float


def dice(a_text, b_text, multiset=False):
    """Sorensen-Dice overlap of the two token sets (or multisets)."""
    a, b = tokenize(a_text), tokenize(b_text)
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    if multiset:
        ca, cb = Counter(a), Counter(b)
        return 2 * sum((ca & cb).values()) / (len(a) + len(b))
    sa, sb = set(a), set(b)
    return 2 * len(sa & sb) / (len(sa) + len(sb))


def distinct_ngram_ratio(query_text, n=3):
    tokens = tokenize(query_text)
    grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    if not grams:
        return 1.0
    return len(set(grams)) / len(grams)


def strip_history_markup(history_text):
    return _HISTORY_MARKUP.sub(" ", history_text)


def analyze_iteration(queries, instances, passages, t, multiset=False):
    """Macro-averaged overlap/length/diversity of one iteration's rewrites.

    ``passages`` maps passage id to text. Turn-1 instances (no history) are
    left out of the history overlap only.
    """
    queries, instances = list(queries), list(instances)
    if len(queries) != len(instances):
        raise ValidationError(f"{len(queries)} queries for {len(instances)} instances")
    if not instances:
        raise ValidationError("nothing to analyze")
    hist, gold, lengths, ratios = [], [], [], []
    for query, inst in zip(queries, instances):
        if inst.history_text:
            hist.append(dice(query, strip_history_markup(inst.history_text), multiset))
        gold_text = " ".join(passages[pid] for pid in inst.gold_passage_ids)
        gold.append(dice(query, gold_text, multiset))
        lengths.append(len(tokenize(query)))
        ratios.append(distinct_ngram_ratio(query))

    def mean(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return QueryStats(t, mean(hist), mean(gold), mean(lengths), mean(ratios))


def write_stats_csv(stats, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iteration",) + STAT_FIELDS)
        for s in stats:
            writer.writerow([s.iteration] + [repr(getattr(s, f)) for f in STAT_FIELDS])


def read_stats_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            QueryStats(int(row["iteration"]), *(float(row[f]) for f in STAT_FIELDS))
            for row in csv.DictReader(fh)
        ]


def trend_report(stats, out_dir, image_format="png"):
    """Write ``query_stats.csv`` and one line plot per metric; returns the paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not stats:
        raise ValidationError("trend report needs at least one analyzed iteration")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = sorted(stats, key=lambda s: s.iteration)
    csv_path = out_dir / "query_stats.csv"
    write_stats_csv(stats, csv_path)
    paths = [csv_path]
    xs = [s.iteration for s in stats]
    for name in STAT_FIELDS:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(xs, [getattr(s, name) for s in stats], marker="o")
        ax.set_xlabel("iteration")
        ax.set_ylabel(name)
        ax.set_xticks(xs)
        fig.tight_layout()
        path = out_dir / f"{name}.{image_format}"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def stats_to_dict(stats):
    return asdict(stats)
