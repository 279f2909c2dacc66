"""Iterative training driver: bootstrap NLL, then generate -> reward -> train.

Layout of a run directory::

    <run_dir>/manifest.json   completed iterations, checksums, epoch stats
    <run_dir>/vocab.txt
    <run_dir>/iter<t>/{model.bin, dataset.jsonl, stats.jsonl}
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from filelock import FileLock, Timeout

from .data import (
    CandidateSet,
    DatasetRow,
    DatasetVersion,
    build_instances,
    load_dataset_version,
    load_passages,
    load_sessions,
    persist_dataset_version,
    sample_fraction,
)
from .embedding import build_store, load_store
from .errors import InvariantError, IterCQRError, ValidationError
from .evaluation import evaluate_entries
from .generator import GeneratorConfig, GeneratorModel, Vocab, fit_generator_vocab
from .retrieval import bm25_build, bm25_search, dense_search
from .training import PHASES, compute_rewards, train_epoch

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "itercqr-manifest/1"
PATH_FIELDS = ("train_sessions", "passages", "d0_path", "store_path", "run_dir", "test_sessions", "qrels")


@dataclass
class RunConfig:
    n: int = 10
    tau: int = 1
    T: int = 15
    epochs_init: int = 5
    epochs_mbr: int = 2
    epochs_top1: int = 5
    learning_rate: float = 1e-5
    batch_size: int = 8
    max_query_len: int = 32
    beam_width: Optional[int] = None
    seed: int = 0
    fraction: float = 1.0
    embedding_size: int = 64
    hidden_size: int = 128
    min_frequency: int = 1
    dim: int = 256
    eval_each_iteration: bool = False
    eval_k: int = 100
    train_sessions: Optional[str] = None
    passages: Optional[str] = None
    d0_path: Optional[str] = None
    store_path: Optional[str] = None
    run_dir: Optional[str] = None
    test_sessions: Optional[str] = None
    qrels: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if not 0 <= self.tau <= self.T:
            raise ValidationError(f"need 0 <= tau <= T, got tau={self.tau}, T={self.T}")
        if min(self.epochs_init, self.epochs_mbr, self.epochs_top1) < 1:
            raise ValidationError("epoch counts must be >= 1")
        if self.batch_size < 1 or self.max_query_len < 1:
            raise ValidationError("batch_size and max_query_len must be >= 1")
        if self.beam_width is not None and self.beam_width < self.n:
            raise ValidationError(f"beam_width={self.beam_width} < n={self.n}")
        if not 0 < self.fraction <= 1:
            raise ValidationError("fraction must be in (0, 1]")

    @property
    def effective_beam(self):
        return self.beam_width or self.n

    def epochs(self, phase):
        return {"init": self.epochs_init, "mbr": self.epochs_mbr, "top1": self.epochs_top1}[phase]

    def generator_config(self):
        return GeneratorConfig(
            embedding_size=self.embedding_size,
            hidden_size=self.hidden_size,
            max_decode_len=self.max_query_len,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )

    def hyperparameters(self):
        """Config minus filesystem paths (what must match for a resume)."""
        return {k: v for k, v in dataclasses.asdict(self).items() if k not in PATH_FIELDS}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        return cls(**d)


def phase_for(t, tau):
    if t == 0:
        return "init"
    return "mbr" if t <= tau else "top1"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json_atomic(path, obj):
    tmp = Path(f"{path}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def rewrite_instances(model, instances, beam_width=10):
    return [model.rewrite(inst.model_input, beam_width) for inst in instances]


def retrieve(queries, instances, store=None, bm25=None, k=100):
    """Run entries for reformulated ``queries``; exactly one of store/bm25."""
    if (store is None) == (bm25 is None):
        raise ValidationError("pass exactly one of store (dense) or bm25 (sparse)")
    if store is not None:
        return [dense_search(q, store, k, inst.instance_id) for q, inst in zip(queries, instances)]
    return [bm25_search(bm25, q, k, inst.instance_id) for q, inst in zip(queries, instances)]


class IterationRunner:
    """Runs iterations 0..T inside one run directory, resuming where it stopped."""

    def __init__(self, config, instances, d0, store, run_dir, eval_instances=None, qrels=None, passages=None):
        self.config = config
        self.instances = list(instances)
        self.store = store
        self.run_dir = Path(run_dir)
        self.eval_instances = eval_instances
        self.qrels = qrels
        self.bm25 = bm25_build(passages) if passages is not None else None
        self.d0 = self._restrict_d0(d0)
        self.manifest_path = self.run_dir / "manifest.json"

    def _restrict_d0(self, d0):
        if d0.iteration != 0:
            raise ValidationError("initial dataset must have iteration 0")
        by_id = {row.instance_id: row for row in d0.rows}
        missing = [inst.instance_id for inst in self.instances if inst.instance_id not in by_id]
        if missing:
            raise ValidationError(f"D0 lacks rewrites for {len(missing)} instances, e.g. {missing[:3]}")
        rows = [by_id[inst.instance_id] for inst in self.instances]
        return DatasetVersion(0, rows, d0.provenance, n=1)

    # ------------------------------------------------------------ manifest

    def _new_manifest(self, vocab_sha):
        return {
            "format": MANIFEST_FORMAT,
            "config": self.config.hyperparameters(),
            "num_instances": len(self.instances),
            "vocab": "vocab.txt",
            "vocab_sha256": vocab_sha,
            "iterations": [],
            "completed": False,
        }

    def _rel(self, path):
        return str(Path(path).relative_to(self.run_dir))

    def verify(self, manifest):
        if manifest.get("format") != MANIFEST_FORMAT:
            raise ValidationError(f"unsupported manifest format {manifest.get('format')!r}")
        if manifest["config"] != self.config.hyperparameters():
            diff = sorted(
                k for k in self.config.hyperparameters()
                if manifest["config"].get(k) != self.config.hyperparameters()[k]
            )
            raise ValidationError(f"config differs from the manifest on {diff}; use a new run dir")
        checks = [(manifest["vocab"], manifest["vocab_sha256"])]
        for rec in manifest["iterations"]:
            checks += [
                (rec["checkpoint"], rec["checkpoint_sha256"]),
                (rec["dataset"], rec["dataset_sha256"]),
                (rec["stats"], rec["stats_sha256"]),
            ]
        for rel, digest in checks:
            path = self.run_dir / rel
            if not path.exists():
                raise InvariantError(f"artifact listed in manifest is missing: {rel}")
            if sha256_file(path) != digest:
                raise InvariantError(f"checksum mismatch for {rel}")

    # ---------------------------------------------------------------- run

    def run(self, stop_after=None):
        """Execute remaining iterations; ``stop_after=t`` halts once t completes."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(self.run_dir / ".lock"), timeout=0)
        try:
            lock.acquire()
        except Timeout as exc:
            raise ValidationError(f"{self.run_dir} is locked by another training process") from exc
        try:
            return self._run(stop_after)
        finally:
            lock.release()

    def _run(self, stop_after):
        vocab_path = self.run_dir / "vocab.txt"
        if self.manifest_path.exists():
            with open(self.manifest_path, encoding="utf-8") as fh:
                manifest = json.load(fh)
            self.verify(manifest)
            vocab = Vocab.load(vocab_path, self.config.min_frequency)
            logger.info("resuming %s after %d completed iterations", self.run_dir, len(manifest["iterations"]))
        else:
            vocab = fit_generator_vocab(
                self.instances, [row.target for row in self.d0.rows], self.config.min_frequency
            )
            vocab.save(vocab_path)
            manifest = self._new_manifest(sha256_file(vocab_path))
            _write_json_atomic(self.manifest_path, manifest)

        for t in range(len(manifest["iterations"]), self.config.T + 1):
            record = self.run_iteration(t, vocab, manifest)
            manifest["iterations"].append(record)
            manifest["completed"] = t == self.config.T
            _write_json_atomic(self.manifest_path, manifest)
            if stop_after is not None and t >= stop_after:
                break
        return manifest

    def load_checkpoint(self, t, manifest):
        rec = manifest["iterations"][t]
        path = self.run_dir / rec["checkpoint"]
        if not path.exists():
            raise InvariantError(f"missing checkpoint for iteration {t}: {path}")
        if sha256_file(path) != rec["checkpoint_sha256"]:
            raise InvariantError(f"checksum mismatch for {rec['checkpoint']}")
        return GeneratorModel.load(path)

    def generate_dataset(self, model, t):
        """D_t: n beam candidates per instance from M_{t-1}, with raw rewards."""
        cfg = self.config
        rows = []
        for inst in self.instances:
            cands = model.generate_candidates(inst.model_input, cfg.n, cfg.effective_beam)
            texts = [c.text for c in cands]
            rewards = compute_rewards(texts, inst.gold_passage_ids, self.store) if inst.gold_passage_ids else None
            rows.append(DatasetRow(inst.instance_id, candidates=CandidateSet(texts, [c.logprob for c in cands], rewards)))
        return DatasetVersion(t, rows, "generated", n=cfg.n, generated_by=t - 1)

    def run_iteration(self, t, vocab, manifest):
        cfg = self.config
        phase = phase_for(t, cfg.tau)
        it_dir = self.run_dir / f"iter{t}"
        it_dir.mkdir(parents=True, exist_ok=True)
        dataset_path = it_dir / "dataset.jsonl"
        record = {"t": t, "phase": phase, "generated_by": None}
        try:
            if t == 0:
                model = GeneratorModel(vocab, cfg.generator_config())
                dataset = self.d0
                record["provenance"] = self.d0.provenance
            else:
                model = self.load_checkpoint(t - 1, manifest)
                dataset = self.generate_dataset(model, t)
                model.reset_optimizer(cfg.learning_rate)
                record["generated_by"] = t - 1
                record["provenance"] = "generated"
                record["candidates"] = candidate_summary(dataset)
            persist_dataset_version(dataset, dataset_path)
            logger.info("iteration %d: %s training on %d rows", t, phase, len(dataset.rows))
            epochs = []
            for epoch in range(cfg.epochs(phase)):
                stats = train_epoch(
                    model, dataset, self.instances, phase, cfg.batch_size, cfg.seed, epoch, self.store
                )
                epochs.append(stats.to_dict())
                logger.info("iteration %d epoch %d: loss %.5f", t, epoch, stats.mean_loss)
        except IterCQRError as exc:
            raise type(exc)(f"iteration {t} ({phase}): {exc}") from exc
        stats_path = it_dir / "stats.jsonl"
        with open(stats_path, "w", encoding="utf-8") as fh:
            for row in epochs:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        ckpt = it_dir / "model.bin"
        model.save(ckpt)
        record.update(
            {
                "dataset": self._rel(dataset_path),
                "dataset_sha256": sha256_file(dataset_path),
                "checkpoint": self._rel(ckpt),
                "checkpoint_sha256": sha256_file(ckpt),
                "stats": self._rel(stats_path),
                "stats_sha256": sha256_file(stats_path),
                "epochs": epochs,
            }
        )
        if cfg.eval_each_iteration and self.eval_instances:
            record["eval"] = self.evaluate(model)
        return record

    def evaluate(self, model):
        queries = rewrite_instances(model, self.eval_instances, self.config.effective_beam)
        out = {}
        runs = {"dense": {"store": self.store}}
        if self.bm25 is not None:
            runs["sparse"] = {"bm25": self.bm25}
        for name, kw in runs.items():
            entries = retrieve(queries, self.eval_instances, k=self.config.eval_k, **kw)
            report, _ = evaluate_entries(entries, self.qrels)
            out[name] = report.to_dict()
        return out


def candidate_summary(dataset):
    rewarded = [row.candidates.rewards for row in dataset.rows if row.candidates.rewards is not None]
    if not rewarded:
        return {"num_rewarded": 0, "mean_top1_reward": None, "mean_candidate_reward": None}
    return {
        "num_rewarded": len(rewarded),
        "mean_top1_reward": float(np.mean([max(r) for r in rewarded])),
        "mean_candidate_reward": float(np.mean([x for r in rewarded for x in r])),
    }


def load_inputs(config):
    """Read the corpus files named in ``config``; returns runner kwargs."""
    for key in ("train_sessions", "passages", "d0_path", "run_dir"):
        if not getattr(config, key):
            raise ValidationError(f"config needs {key!r}")
    for key in ("train_sessions", "passages", "d0_path", "store_path", "test_sessions", "qrels"):
        value = getattr(config, key)
        if value and not Path(value).exists():
            raise FileNotFoundError(value)
    passages = load_passages(config.passages)
    store = load_store(config.store_path) if config.store_path else build_store(passages, config.dim)
    instances = sample_fraction(build_instances(load_sessions(config.train_sessions)), config.fraction, config.seed)
    d0 = load_dataset_version(config.d0_path)
    kwargs = {"config": config, "instances": instances, "d0": d0, "store": store, "run_dir": config.run_dir}
    if config.eval_each_iteration:
        if not (config.test_sessions and config.qrels):
            raise ValidationError("eval_each_iteration needs test_sessions and qrels")
        from .evaluation import load_qrels

        kwargs["eval_instances"] = build_instances(load_sessions(config.test_sessions))
        kwargs["qrels"] = load_qrels(config.qrels)
        kwargs["passages"] = passages
    return kwargs


def run_all(config, stop_after=None):
    """Iterations 0..T (or resume); returns ``(final_model, manifest)``."""
    runner = IterationRunner(**load_inputs(config))
    manifest = runner.run(stop_after)
    last = len(manifest["iterations"]) - 1
    return runner.load_checkpoint(last, manifest), manifest


def resume(config, manifest=None):
    """Continue a partially completed run; a finished run is a no-op."""
    path = Path(config.run_dir) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest at {path}")
    return run_all(config)


def load_iteration_model(run_dir, t):
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if t >= len(manifest["iterations"]):
        raise ValidationError(f"iteration {t} not completed in {run_dir}")
    rec = manifest["iterations"][t]
    path = run_dir / rec["checkpoint"]
    if sha256_file(path) != rec["checkpoint_sha256"]:
        raise InvariantError(f"checksum mismatch for {rec['checkpoint']}")
    return GeneratorModel.load(path)
