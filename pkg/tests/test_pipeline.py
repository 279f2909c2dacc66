import json
import os

import pytest
from filelock import FileLock

from itercqr.data import DatasetRow, DatasetVersion, load_dataset_version, toy_rewrites
from itercqr.embedding import build_store
from itercqr.errors import InvariantError, ValidationError
from itercqr.generator import GeneratorModel
from itercqr.pipeline import (
    IterationRunner,
    RunConfig,
    load_iteration_model,
    phase_for,
    retrieve,
    rewrite_instances,
)

SMALL = dict(n=3, tau=1, T=3, epochs_init=2, epochs_mbr=1, epochs_top1=1, learning_rate=1e-2,
             batch_size=4, max_query_len=8, embedding_size=8, hidden_size=16, seed=0)


def _runner(toy_small, run_dir, **overrides):
    sessions, passages, _, instances = toy_small
    rewrites = toy_rewrites(sessions, 0.5, 0)
    d0 = DatasetVersion(0, [DatasetRow(i.instance_id, target=rewrites[i.instance_id]) for i in instances], "file")
    config = RunConfig(**{**SMALL, **overrides})
    return IterationRunner(config, instances, d0, build_store(passages), run_dir)


def _artifact_bytes(run_dir):
    out = {}
    for root, _, files in os.walk(run_dir):
        for name in files:
            if name != ".lock":
                path = os.path.join(root, name)
                out[os.path.relpath(path, run_dir)] = open(path, "rb").read()
    return out


@pytest.fixture(scope="module")
def full_run(toy_small, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("full")
    manifest = _runner(toy_small, run_dir).run()
    return run_dir, manifest


def test_phase_schedule():
    assert [phase_for(t, 1) for t in range(4)] == ["init", "mbr", "top1", "top1"]
    assert [phase_for(t, 0) for t in range(3)] == ["init", "top1", "top1"]
    assert [phase_for(t, 3) for t in range(4)] == ["init", "mbr", "mbr", "mbr"]


def test_artifacts_and_lineage(full_run):
    run_dir, manifest = full_run
    assert manifest["completed"] is True
    recs = manifest["iterations"]
    assert [r["t"] for r in recs] == [0, 1, 2, 3]
    assert [r["phase"] for r in recs] == ["init", "mbr", "top1", "top1"]
    assert [r["generated_by"] for r in recs] == [None, 0, 1, 2]
    assert recs[0]["provenance"] == "file"
    for t in range(4):
        assert (run_dir / f"iter{t}" / "model.bin").exists()
    for t in (1, 2, 3):
        version = load_dataset_version(run_dir / f"iter{t}" / "dataset.jsonl")
        assert version.generated_by == t - 1 and version.n == 3
        ids = [row.instance_id for row in version.rows]
        assert len(ids) == len(set(ids)) == 12
        assert all(len(row.candidates) == 3 and row.candidates.rewards is not None for row in version.rows)


def test_epoch_counts_follow_phase(full_run):
    _, manifest = full_run
    assert [len(r["epochs"]) for r in manifest["iterations"]] == [2, 1, 1, 1]


def test_same_seed_same_bytes(full_run, toy_small, tmp_path):
    run_dir, _ = full_run
    _runner(toy_small, tmp_path / "again").run()
    assert _artifact_bytes(tmp_path / "again") == _artifact_bytes(run_dir)


def test_resume_matches_uninterrupted(full_run, toy_small, tmp_path):
    run_dir, _ = full_run
    partial = _runner(toy_small, tmp_path / "r").run(stop_after=1)
    assert len(partial["iterations"]) == 2 and partial["completed"] is False
    _runner(toy_small, tmp_path / "r").run()
    assert _artifact_bytes(tmp_path / "r") == _artifact_bytes(run_dir)


def test_resume_completed_is_noop(toy_small, tmp_path):
    runner = _runner(toy_small, tmp_path / "r", T=1)
    runner.run()
    before = _artifact_bytes(tmp_path / "r")
    stamp = (tmp_path / "r" / "iter1" / "model.bin").stat().st_mtime_ns
    runner.run()
    assert _artifact_bytes(tmp_path / "r") == before
    assert (tmp_path / "r" / "iter1" / "model.bin").stat().st_mtime_ns == stamp


def test_tampered_checkpoint_refuses_resume(toy_small, tmp_path):
    _runner(toy_small, tmp_path / "r").run(stop_after=1)
    ckpt = tmp_path / "r" / "iter1" / "model.bin"
    blob = bytearray(ckpt.read_bytes())
    blob[-1] ^= 0xFF
    ckpt.write_bytes(bytes(blob))
    with pytest.raises(InvariantError, match="checksum"):
        _runner(toy_small, tmp_path / "r").run()


def test_config_change_refuses_resume(toy_small, tmp_path):
    _runner(toy_small, tmp_path / "r", T=1).run()
    with pytest.raises(ValidationError, match="learning_rate"):
        _runner(toy_small, tmp_path / "r", T=1, learning_rate=0.5).run()


def test_locked_run_dir(toy_small, tmp_path):
    run_dir = tmp_path / "r"
    run_dir.mkdir()
    with FileLock(str(run_dir / ".lock")):
        with pytest.raises(ValidationError, match="locked"):
            _runner(toy_small, run_dir, T=0, tau=0).run()


def test_d0_must_cover_instances(toy_small, tmp_path):
    sessions, passages, _, instances = toy_small
    d0 = DatasetVersion(0, [DatasetRow(instances[0].instance_id, target="x")], "file")
    with pytest.raises(ValidationError, match="lacks"):
        IterationRunner(RunConfig(**SMALL), instances, d0, build_store(passages), tmp_path)


@pytest.mark.parametrize(
    "bad",
    [dict(n=0), dict(tau=4), dict(tau=-1), dict(epochs_mbr=0), dict(beam_width=2), dict(fraction=0)],
)
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        RunConfig(**{**SMALL, **bad})


def test_unknown_config_key():
    with pytest.raises(ValidationError, match="lerning_rate"):
        RunConfig.from_dict({"lerning_rate": 1e-3})


def test_load_iteration_model_and_rewrite(full_run, toy_small):
    run_dir, manifest = full_run
    _, passages, _, instances = toy_small
    model = load_iteration_model(run_dir, 3)
    assert isinstance(model, GeneratorModel)
    queries = rewrite_instances(model, instances[:4], beam_width=3)
    assert len(queries) == 4 and all(isinstance(q, str) for q in queries)
    entries = retrieve(queries, instances[:4], store=build_store(passages), k=5)
    assert [e.query_id for e in entries] == [i.instance_id for i in instances[:4]]
    with pytest.raises(ValidationError):
        load_iteration_model(run_dir, 4)
    with pytest.raises(ValidationError):
        retrieve(queries, instances[:4], k=5)


def test_manifest_is_plain_json(full_run):
    run_dir, manifest = full_run
    on_disk = json.loads((run_dir / "manifest.json").read_text())
    assert on_disk == manifest
    assert on_disk["num_instances"] == 12
