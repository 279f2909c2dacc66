"""``itercqr`` command line: one entry point, one JSON summary on stdout per command.

Exit codes: 0 ok, 2 usage/validation/missing input, 3 external service,
4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import analysis, data, evaluation, pipeline, retrieval
from .bootstrap import BootstrapConfig, RewriteClient, bootstrap_dataset, write_rewrites
from .embedding import build_store, load_store, persist_store
from .errors import ExternalServiceError, InvariantError, ValidationError

logger = logging.getLogger("itercqr")

EXIT_OK, EXIT_USAGE, EXIT_EXTERNAL, EXIT_INTERNAL = 0, 2, 3, 4
CLI_KEYS = {"retriever": "dense", "k": 100, "slices": [], "bootstrap_mode": "file", "rewrites": None}


def load_config(path):
    """Flat JSON config: every RunConfig field plus the CLI-only keys."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    run_keys = {f.name for f in fields(pipeline.RunConfig)}
    unknown = sorted(set(raw) - run_keys - set(CLI_KEYS))
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    base = Path(path).resolve().parent
    run_part = {k: v for k, v in raw.items() if k in run_keys}
    for key in pipeline.PATH_FIELDS:
        if run_part.get(key):
            run_part[key] = str((base / run_part[key]).resolve())
    extras = dict(CLI_KEYS)
    extras.update({k: v for k, v in raw.items() if k in CLI_KEYS})
    if extras["retriever"] not in ("dense", "sparse", "both"):
        raise ValidationError(f"retriever must be dense, sparse or both, got {extras['retriever']!r}")
    return pipeline.RunConfig(**run_part), extras


def _emit(summary):
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    sys.stdout.flush()


def _require(*paths):
    for p in paths:
        if p is None or not Path(p).exists():
            raise FileNotFoundError(p)


# ------------------------------------------------------------- commands


def cmd_synth_data(args):
    if args.entities is None:
        args.entities = args.sessions
    sessions, passages, qrels = data.generate_toy_corpus(args.seed, args.sessions, args.turns, args.entities)
    train, test = data.split_sessions(sessions, args.test_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.write_sessions(out / "sessions.jsonl", sessions)
    data.write_sessions(out / "train_sessions.jsonl", train)
    data.write_sessions(out / "test_sessions.jsonl", test)
    data.write_passages(out / "passages.jsonl", passages)
    data.write_qrels(out / "qrels.txt", qrels)
    write_rewrites(out / "rewrites.jsonl", data.toy_rewrites(sessions, args.resolve_fraction, args.seed))
    return {
        "command": "synth-data",
        "sessions": len(sessions),
        "train_sessions": len(train),
        "test_sessions": len(test),
        "passages": len(passages),
        "qrels": len(qrels),
        "out": str(out),
    }


def cmd_bootstrap(args):
    _require(args.sessions)
    sessions = data.load_sessions(args.sessions)
    instances = data.build_instances(sessions)
    if args.mode == "file":
        _require(args.rewrites)
    config = BootstrapConfig(
        mode=args.mode,
        endpoint=args.endpoint,
        model=args.model,
        temperature=args.temperature,
        timeout=args.timeout,
        rewrites_path=args.rewrites,
        cache_path=args.cache,
    )
    client = RewriteClient(config)
    try:
        d0 = bootstrap_dataset(instances, sessions, config, client)
    finally:
        client.close()
    data.persist_dataset_version(d0, args.out)
    return {
        "command": "bootstrap",
        "rows": len(d0.rows),
        "provenance": d0.provenance,
        "network_calls": client.network_calls,
        "out": args.out,
    }


def cmd_embed(args):
    _require(args.passages)
    passages = data.load_passages(args.passages)
    store = build_store(passages, args.dim)
    persist_store(store, args.out)
    summary = {"command": "embed", "rows": len(store), "dim": store.dim, "out": args.out}
    if args.bm25_out:
        retrieval.save_bm25(retrieval.bm25_build(passages), args.bm25_out)
        summary["bm25_out"] = args.bm25_out
    return summary


def cmd_train(args):
    _require(args.config)
    config, _ = load_config(args.config)
    _, manifest = pipeline.run_all(config, stop_after=args.stop_after)
    return {
        "command": "train",
        "run_dir": config.run_dir,
        "iterations_completed": len(manifest["iterations"]),
        "phases": [rec["phase"] for rec in manifest["iterations"]],
        "completed": manifest["completed"],
    }


def _eval_instances(config, sessions_path):
    path = sessions_path or config.test_sessions
    _require(path)
    return data.build_instances(data.load_sessions(path))


def cmd_retrieve(args):
    _require(args.config)
    config, extras = load_config(args.config)
    instances = _eval_instances(config, args.sessions)
    retriever = args.retriever or extras["retriever"]
    k = args.k or extras["k"]
    if args.raw:
        queries = [inst.current_query for inst in instances]
    else:
        model = pipeline.load_iteration_model(config.run_dir, args.model_iter)
        queries = pipeline.rewrite_instances(model, instances, config.effective_beam)
    _require(config.passages)
    passages = data.load_passages(config.passages)
    outputs = {}
    targets = ["dense", "sparse"] if retriever == "both" else [retriever]
    for name in targets:
        if name == "dense":
            store = load_store(config.store_path) if config.store_path else build_store(passages, config.dim)
            entries = pipeline.retrieve(queries, instances, store=store, k=k)
        else:
            entries = pipeline.retrieve(queries, instances, bm25=retrieval.bm25_build(passages), k=k)
        out = args.out if len(targets) == 1 else str(Path(args.out).with_suffix(f".{name}.trec"))
        retrieval.write_run(entries, out)
        outputs[name] = out
    if args.queries_out:
        with open(args.queries_out, "w", encoding="utf-8") as fh:
            for inst, q in zip(instances, queries):
                fh.write(json.dumps({"instance_id": inst.instance_id, "query": q}) + "\n")
    return {
        "command": "retrieve",
        "model_iter": None if args.raw else args.model_iter,
        "queries": len(instances),
        "k": k,
        "runs": outputs,
    }


def cmd_evaluate(args):
    _require(args.run, args.qrels)
    instances = None
    if args.slices:
        _require(args.sessions)
        instances = data.build_instances(data.load_sessions(args.sessions))
    reports = evaluation.evaluate_run(args.run, args.qrels, instances, args.slices)
    if args.out:
        evaluation.write_report(reports, args.out)
    return {"command": "evaluate", "reports": [r.to_dict() for r in reports]}


def _parse_iters(spec):
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in spec.split(",")]


def cmd_analyze(args):
    _require(args.config)
    config, _ = load_config(args.config)
    instances = _eval_instances(config, args.sessions)
    _require(config.passages)
    texts = {p.passage_id: p.text for p in data.load_passages(config.passages)}
    stats = []
    for t in _parse_iters(args.iters):
        model = pipeline.load_iteration_model(config.run_dir, t)
        queries = pipeline.rewrite_instances(model, instances, config.effective_beam)
        stats.append(analysis.analyze_iteration(queries, instances, texts, t))
    paths = analysis.trend_report(stats, args.out, args.image_format)
    return {
        "command": "analyze",
        "iterations": [analysis.stats_to_dict(s) for s in stats],
        "files": [str(p) for p in paths],
    }


# --------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(prog="itercqr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic coreference corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sessions", type=int, default=40)
    p.add_argument("--turns", type=int, default=4)
    p.add_argument("--entities", type=int, default=None)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--resolve-fraction", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("bootstrap", help="build D0 from an LLM or a rewrites file")
    p.add_argument("--sessions", required=True)
    p.add_argument("--mode", choices=("api", "file"), default="file")
    p.add_argument("--rewrites")
    p.add_argument("--cache")
    p.add_argument("--endpoint", default=BootstrapConfig.endpoint)
    p.add_argument("--model", default=BootstrapConfig.model)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("embed", help="embed passages into a store file")
    p.add_argument("--passages", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--bm25-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="run (or resume) iterations 0..T")
    p.add_argument("--config", required=True)
    p.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("retrieve", help="rewrite queries with M_t and search")
    p.add_argument("--config", required=True)
    p.add_argument("--model-iter", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="search with the raw conversational query")
    p.add_argument("--sessions")
    p.add_argument("--retriever", choices=("dense", "sparse", "both"))
    p.add_argument("--k", type=int)
    p.add_argument("--queries-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="MRR / NDCG@3 / Recall@10,100 of a run file")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--sessions")
    p.add_argument("--slices", nargs="*", choices=("label", "pid"), default=[])
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="per-iteration query statistics and plots")
    p.add_argument("--config", required=True)
    p.add_argument("--iters", default="0..0")
    p.add_argument("--sessions")
    p.add_argument("--image-format", default="png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _emit(args.func(args))
        return EXIT_OK
    except ExternalServiceError as exc:
        logger.error("%s", exc)
        _emit({"command": args.command, "error": str(exc)})
        return EXIT_EXTERNAL
    except (ValidationError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        _emit({"command": args.command, "error": str(exc)})
        return EXIT_USAGE
    except InvariantError as exc:
        logger.error("%s", exc)
        _emit({"command": args.command, "error": str(exc)})
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - anything unexpected is an internal failure
        logger.exception("internal error")
        _emit({"command": args.command, "error": repr(exc)})
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
