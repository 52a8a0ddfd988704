"""Provenance manifest checks: recording, ownership, verification and
tamper detection."""

import json

import pytest

from kaleido.errors import ContractError
from kaleido.manifest import ManifestEntry, RunManifest, config_hash, file_hash


def touch(root, name, text="payload\n"):
    p = root / name
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p


def test_config_hash_canonicalization():
    assert config_hash({"a": 1, "b": [2, 3]}) == config_hash({"b": [2, 3], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_file_hash_tracks_content(tmp_path):
    p = touch(tmp_path, "f.txt", "one")
    h1 = file_hash(p)
    p.write_text("two")
    assert file_hash(p) != h1


def test_record_and_reload(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    a = touch(tmp_path, "dataset.csv")
    b = touch(tmp_path, "dataset.json")
    entry = man.record("gen-data", {"n": 10}, master_seed=7, artifact_paths=[a, b])
    assert set(entry.artifacts) == {"dataset.csv", "dataset.json"}
    again = RunManifest.load_or_create(tmp_path)
    assert len(again.entries) == 1
    assert again.entries[0].artifacts == entry.artifacts
    assert again.entries[0].master_seed == 7
    assert again.verify() == []


def test_record_rejects_missing_or_outside(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    with pytest.raises(ContractError):
        man.record("x", {}, 0, artifact_paths=[tmp_path / "ghost.txt"])
    outside = touch(tmp_path.parent, "stray.txt")
    with pytest.raises(ContractError):
        man.record("x", {}, 0, artifact_paths=[outside])


def test_verify_flags_missing_artifact(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    p = touch(tmp_path, "a.txt")
    man.record("cmd", {}, 0, artifact_paths=[p])
    p.unlink()
    problems = RunManifest.load_or_create(tmp_path).verify()
    assert any("missing artifact a.txt" in msg for msg in problems)


def test_verify_flags_tampering(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    p = touch(tmp_path, "a.txt", "original")
    man.record("cmd", {}, 0, artifact_paths=[p])
    p.write_text("edited behind the manifest's back")
    problems = RunManifest.load_or_create(tmp_path).verify()
    assert any("hash mismatch for a.txt" in msg for msg in problems)


def test_verify_flags_untracked(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    man.record("cmd", {}, 0, artifact_paths=[touch(tmp_path, "a.txt")])
    touch(tmp_path, "sub/rogue.txt")
    problems = RunManifest.load_or_create(tmp_path).verify()
    assert problems == ["untracked file sub/rogue.txt"]


def test_rerecord_supersedes_ownership(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    p = touch(tmp_path, "a.txt", "v1")
    man.record("cmd", {"seed": 1}, 1, artifact_paths=[p])
    p.write_text("v2")
    man.record("cmd", {"seed": 2}, 2, artifact_paths=[p])
    # old entry lost its only artifact and was dropped; one owner remains
    assert len(man.entries) == 1
    assert man.entries[0].master_seed == 2
    assert man.verify() == []


def test_partial_supersede_keeps_other_artifacts(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    a = touch(tmp_path, "a.txt")
    b = touch(tmp_path, "b.txt")
    man.record("first", {}, 1, artifact_paths=[a, b])
    man.record("second", {}, 2, artifact_paths=[a])
    assert len(man.entries) == 2
    assert set(man.entries[0].artifacts) == {"b.txt"}
    assert set(man.entries[1].artifacts) == {"a.txt"}
    assert man.verify() == []


def test_warnings_survive_round_trip(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    man.record("sweep", {}, 3, artifact_paths=[touch(tmp_path, "sweep.csv")],
               warnings=["seed mismatch between cells"])
    again = RunManifest.load_or_create(tmp_path)
    assert again.entries[0].warnings == ["seed mismatch between cells"]


def test_manifest_file_is_stable_json(tmp_path):
    man = RunManifest.load_or_create(tmp_path)
    man.record("cmd", {}, 0, artifact_paths=[touch(tmp_path, "a.txt")])
    blob = json.loads((tmp_path / "manifest.json").read_text())
    assert blob["tool_version"]
    assert [sorted(e) for e in blob["entries"]] == [
        ["artifacts", "command", "config_hash", "master_seed", "timestamp", "warnings"]]


def test_entry_round_trip():
    e = ManifestEntry(command="train", config_hash="ab", master_seed=5,
                      artifacts={"x": "h"}, warnings=["w"], timestamp=1.5)
    assert ManifestEntry.from_jsonable(e.to_jsonable()) == e
